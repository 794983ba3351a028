import argparse
import logging
import sys
from typing import Dict, List, Optional, Sequence

from app.config import Config
from app.services.experiment_config import load_experiment_config
from app.services.experiments import run_experiment
from app.utils.constants import (COMMANDS, CONFIG_DEFAULTS, EXIT_ASSERTION_FAILED, EXIT_CONFIG_ERROR,
                                 EXIT_NUMERICAL_ABORT, EXIT_OK)
from app.utils.errors import NumericalError, ParameterError

logger = logging.getLogger('app')

# Short flags and the dotted keys they set
SHORTCUTS = {'seed': 'run.seed', 'threads': 'run.threads', 'out': 'output.dir', 'preset': 'experiment.preset'}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='python -m app.main',
        description=f"{Config.APP_NAME}: proximal density evolution and particle sampling experiments",
        allow_abbrev=False,
        epilog="Any config key can be overridden as --<section.key> <value>, e.g. --sampler.h 0.02",
    )
    parser.add_argument('command', choices=sorted(COMMANDS), help="experiment to run")
    parser.add_argument('--config', help="key = value config file with dotted keys")
    parser.add_argument('--out', help="artifact directory")
    parser.add_argument('--seed', help="random seed")
    parser.add_argument('--threads', help="BLAS thread limit (speed only)")
    parser.add_argument('--preset', help="named experiment preset")
    parser.add_argument('--log-level', default=None, help="DEBUG, INFO, WARNING or ERROR")
    return parser


def parse_overrides(extra: Sequence[str]) -> Dict[str, str]:
    """Turn leftover `--section.key value` / `--section.key=value` pairs into a dict"""
    overrides = {}
    tokens = list(extra)
    while tokens:
        token = tokens.pop(0)
        if not token.startswith('--'):
            raise ParameterError(f"unexpected argument {token!r}")
        key, sep, value = token[2:].partition('=')
        if not sep:
            if not tokens:
                raise ParameterError(f"missing value for --{key}")
            value = tokens.pop(0)
        if key not in CONFIG_DEFAULTS:
            raise ParameterError(f"unknown option --{key}")
        overrides[key] = value
    return overrides


def configure_logging(level: Optional[str]) -> None:
    level = 'DEBUG' if Config.DEBUG else (level or Config.LOG_LEVEL).upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    configure_logging(args.log_level)

    try:
        overrides = parse_overrides(extra)
        for flag, key in SHORTCUTS.items():
            if getattr(args, flag) is not None:
                overrides[key] = getattr(args, flag)
        overrides['experiment.name'] = COMMANDS[args.command]
        config = load_experiment_config(args.config, overrides)
        result = run_experiment(config)
    except NumericalError as exc:
        logger.error(f"Numerical abort: {exc}")
        return EXIT_NUMERICAL_ABORT
    except ParameterError as exc:
        logger.error(f"Configuration error: {exc}")
        return EXIT_CONFIG_ERROR

    for path in result.artifacts:
        print(path)
    return EXIT_OK if result.passed else EXIT_ASSERTION_FAILED


if __name__ == '__main__':
    sys.exit(main())
