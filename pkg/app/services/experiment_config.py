import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional

from dotenv import dotenv_values

from app.config import Config
from app.models.density import Grid
from app.models.potential import Potential, catalog_potential
from app.models.proximal import ProxBackend
from app.services.samplers import SamplerConfig, target_grid
from app.utils.constants import BACKENDS, COMMANDS, CONFIG_DEFAULTS, MAX_GRID_DIM, PRESETS, TARGET_IDS
from app.utils.errors import ConfigError, ParameterError
from app.utils.helpers import parse_bool, parse_float_list

logger = logging.getLogger(__name__)


@dataclass
class TargetSpec:
    """Catalog id plus the parameters handed to catalog_potential"""
    id: str
    dim: int
    params: Dict[str, Any] = field(default_factory=dict)

    def build(self) -> Potential:
        return catalog_potential(self.id, self.dim, **self.params)


@dataclass
class ExperimentConfig:
    experiment: str
    target: TargetSpec
    sampler: SamplerConfig
    grid: Optional[Grid]
    backend: ProxBackend
    prox_T: float
    prox_iterations: int
    save_every: int
    T_list: List[float]
    y_list: List[float]
    h_list: List[float]
    diag_every: int
    output_dir: str
    plot: bool
    threshold: float
    delta: float
    terminal_kl: float
    min_slope: float
    seed: int
    threads: Optional[int]
    record_wallclock: bool
    diagnostics_source: str
    values: Dict[str, str] = field(default_factory=dict)

    @property
    def beta(self) -> float:
        return self.sampler.beta

    def resolve_grid(self, potential: Potential) -> Grid:
        """Configured grid, or the catalog default for the target"""
        if self.grid is not None:
            if self.grid.dim != potential.dim:
                raise ConfigError(f"grid dimension {self.grid.dim} does not match target dimension {potential.dim}")
            return self.grid
        if potential.dim > MAX_GRID_DIM:
            raise ConfigError(f"{self.experiment} needs a tensor grid, which supports d <= {MAX_GRID_DIM}")
        return target_grid(potential)

    def to_manifest(self) -> Dict[str, str]:
        return dict(sorted(self.values.items()))


def _read_file(path: str) -> Dict[str, str]:
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    entries = dotenv_values(path, interpolate=False)
    missing = [key for key, value in entries.items() if value is None]
    if missing:
        raise ConfigError(f"config keys without a value in {path}: {', '.join(missing)}")
    return {key: str(value).strip() for key, value in entries.items()}


def _check_keys(entries: Mapping[str, str], source: str) -> None:
    unknown = sorted(set(entries) - set(CONFIG_DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config keys in {source}: {', '.join(unknown)}")


def merge_values(path: Optional[str] = None, overrides: Optional[Mapping[str, str]] = None) -> Dict[str, str]:
    """Defaults, then preset, then file, then command-line overrides"""
    file_values = _read_file(path) if path else {}
    overrides = {key: str(value) for key, value in (overrides or {}).items()}
    _check_keys(file_values, path or 'file')
    _check_keys(overrides, 'command line')

    values = dict(CONFIG_DEFAULTS)
    preset = overrides.get('experiment.preset') or file_values.get('experiment.preset') or ''
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(sorted(PRESETS))}")
        values.update(PRESETS[preset])
        values['experiment.preset'] = preset
    values.update(file_values)
    values.update(overrides)
    return values


def _number(values: Mapping[str, str], key: str, kind=float):
    text = values[key]
    try:
        return kind(text)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key} = {text!r} is not a valid {kind.__name__}") from exc


def _optional(values: Mapping[str, str], key: str, kind=float):
    return _number(values, key, kind) if values[key].strip() else None


def _floats(values: Mapping[str, str], key: str) -> List[float]:
    try:
        return parse_float_list(values[key])
    except ParameterError as exc:
        raise ConfigError(f"{key}: {exc}") from exc


def _flag(values: Mapping[str, str], key: str) -> bool:
    try:
        return parse_bool(values[key])
    except ParameterError as exc:
        raise ConfigError(f"{key}: {exc}") from exc


def _grid(values: Mapping[str, str], dim: int) -> Optional[Grid]:
    bounds = [values[key].strip() for key in ('grid.lo', 'grid.hi', 'grid.n')]
    if not any(bounds):
        return None
    if not all(bounds):
        raise ConfigError("grid.lo, grid.hi and grid.n must be set together")
    if dim > MAX_GRID_DIM:
        raise ConfigError(f"tensor grids support d <= {MAX_GRID_DIM}, got d={dim}")
    return Grid.uniform(_number(values, 'grid.lo'), _number(values, 'grid.hi'),
                        _number(values, 'grid.n', int), dim)


def build_config(values: Dict[str, str]) -> ExperimentConfig:
    experiment = COMMANDS.get(values['experiment.name'], values['experiment.name'])
    if experiment not in COMMANDS.values():
        raise ConfigError(f"unknown experiment {values['experiment.name']!r}")

    target_id = values['target.id']
    if target_id not in TARGET_IDS:
        raise ConfigError(f"unknown target {target_id!r}; choose from {', '.join(TARGET_IDS)}")
    backend = values['prox.backend']
    if backend not in BACKENDS:
        raise ConfigError(f"unknown backend {backend!r}; choose from {', '.join(BACKENDS)}")

    dim = _number(values, 'target.dim', int)
    if dim < 1:
        raise ConfigError(f"target.dim must be positive, got {dim}")
    beta = _number(values, 'target.beta')
    target = TargetSpec(target_id, dim, {
        'alpha': _number(values, 'target.alpha'),
        'a': _number(values, 'target.a'),
        'a_along': values['target.a_along'],
        'sigma': _number(values, 'target.sigma'),
        'b': _number(values, 'target.b'),
        'beta': beta,
        'path': values['target.path'],
    })

    seed = _number(values, 'run.seed', int)
    threads = _optional(values, 'run.threads', int)
    record_wallclock = _flag(values, 'run.wallclock')
    source = values['diagnostics.source']
    bandwidth = values['sampler.kde_bandwidth']
    grid = _grid(values, dim)

    try:
        sampler = SamplerConfig(
            method=values['sampler.method'],
            h=_number(values, 'sampler.h'),
            T=_optional(values, 'sampler.T'),
            s=_number(values, 'sampler.s'),
            beta=beta,
            n_particles=_number(values, 'sampler.n_particles', int),
            n_steps=_number(values, 'sampler.n_steps', int),
            seed=seed,
            backend=ProxBackend(backend) if backend != 'particle' else ProxBackend.QUADRATURE,
            kde_bandwidth=bandwidth if bandwidth == 'auto' else _number(values, 'sampler.kde_bandwidth'),
            init_law=values['init.law'],
            init_mean=_number(values, 'init.mean'),
            init_variance=_number(values, 'init.variance'),
            init_scale=values['init.scale'],
            grid=grid,
            diagnostics_source=source,
            record_wallclock=record_wallclock,
            progress=_flag(values, 'run.progress'),
            threads=threads,
        )
    except ConfigError:
        raise
    except ParameterError as exc:
        raise ConfigError(str(exc)) from exc

    if backend == 'particle' and sampler.method != 'brwp_particle':
        raise ConfigError("the particle backend is only available to sampler.method = brwp_particle")

    config = ExperimentConfig(
        experiment=experiment,
        target=target,
        sampler=sampler,
        grid=grid,
        backend=ProxBackend(backend),
        prox_T=_number(values, 'prox.T'),
        prox_iterations=_number(values, 'prox.iterations', int),
        save_every=_number(values, 'prox.save_every', int),
        T_list=_floats(values, 'prox.T_list'),
        y_list=_floats(values, 'prox.y_list'),
        h_list=_floats(values, 'sampler.h_list'),
        diag_every=_number(values, 'run.diag_every', int),
        output_dir=values['output.dir'] or os.path.join(Config.OUTPUT_DIR, experiment),
        plot=_flag(values, 'output.plot'),
        threshold=_number(values, 'check.threshold'),
        delta=_number(values, 'check.delta'),
        terminal_kl=_number(values, 'check.terminal_kl'),
        min_slope=_number(values, 'check.min_slope'),
        seed=seed,
        threads=threads,
        record_wallclock=record_wallclock,
        diagnostics_source=source,
        values=dict(values),
    )
    if config.prox_iterations < 0 or config.save_every < 1 or config.diag_every < 1:
        raise ConfigError("prox.iterations must be >= 0; prox.save_every and run.diag_every >= 1")
    if not config.delta > 0:
        raise ConfigError(f"check.delta must be positive, got {config.delta}")
    return config


def load_experiment_config(path: Optional[str] = None,
                           overrides: Optional[Mapping[str, str]] = None) -> ExperimentConfig:
    """Load a dotted key = value config file with command-line overrides on top"""
    values = merge_values(path, overrides)
    config = build_config(values)
    logger.debug(f"Loaded {config.experiment} config ({len(values)} keys, preset "
                 f"{values['experiment.preset'] or 'none'})")
    return config
