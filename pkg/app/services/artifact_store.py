import json
import logging
import os
from typing import Any, Dict, Optional, Sequence

import pandas as pd

from app import __version__
from app.models.density import GridDensity, ParticleEnsemble
from app.utils.constants import RUN_COLUMNS
from app.utils.errors import ConfigError
from app.utils.helpers import format_float, git_describe

logger = logging.getLogger(__name__)


class ArtifactStore:
    """Writes every artifact of one experiment under a single directory"""

    def __init__(self, output_dir: str):
        self.output_dir = output_dir
        try:
            os.makedirs(output_dir, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"cannot create output directory {output_dir!r}: {exc}") from exc
        if not os.access(output_dir, os.W_OK):
            raise ConfigError(f"output directory {output_dir!r} is not writable")
        self.written = []

    def path(self, name: str) -> str:
        return os.path.join(self.output_dir, name)

    def _record(self, name: str) -> str:
        path = self.path(name)
        self.written.append(path)
        logger.info(f"Wrote {path}")
        return path

    def write_manifest(self, values: Dict[str, str], seed: int, backend: str, method: str,
                       extra: Optional[Dict[str, Any]] = None) -> str:
        manifest = {
            'config': dict(sorted(values.items())),
            'git': git_describe(os.path.dirname(os.path.abspath(__file__))),
            'seed': seed,
            'backend': backend,
            'method': method,
            'version': __version__,
        }
        if extra:
            manifest.update(extra)
        return self.write_json('manifest.json', manifest)

    def write_json(self, name: str, payload: Dict[str, Any]) -> str:
        with open(self.path(name), 'w', encoding='utf-8', newline='\n') as handle:
            json.dump(payload, handle, indent=2, sort_keys=True)
            handle.write('\n')
        return self._record(name)

    def write_frame(self, name: str, frame: pd.DataFrame) -> str:
        """CSV with shortest round-trip floats, `nan` for missing values and LF endings"""
        frame.to_csv(self.path(name), index=False, float_format=format_float,
                     na_rep='nan', lineterminator='\n')
        return self._record(name)

    def write_run(self, name: str, rows: Sequence[Dict[str, float]]) -> str:
        frame = pd.DataFrame(list(rows), columns=RUN_COLUMNS)
        frame['iter'] = frame['iter'].astype(int)
        return self.write_frame(name, frame)

    def write_density(self, name: str, density: GridDensity) -> str:
        stem, _ = os.path.splitext(name)
        self.write_json(f'{stem}.json', density.sidecar())
        return self.write_frame(name, density.to_frame())

    def write_ensemble(self, name: str, ensemble: ParticleEnsemble) -> str:
        return self.write_frame(name, ensemble.to_frame())


def read_frame(path: str) -> pd.DataFrame:
    return pd.read_csv(path, na_values=['nan'], keep_default_na=False)
