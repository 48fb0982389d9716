import logging
import logging.config
import argparse
import os

from typing import Any, Dict, List, Optional

from splitting_sampler.config import (
    ExperimentConfig, config_from_dict, read_raw_config, serialize_config
)
from splitting_sampler.exceptions import (
    ConfigError, InvalidParams, SplittingSamplerException
)
from splitting_sampler.experiment import MANIFEST_FILENAME, prepare_output_dir, run_experiment
from splitting_sampler.helpers import format_dataclass_fields


logger = logging.getLogger(__name__)


EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

LOG_FILENAME = 'splitting_sampler.log'


def configure_logging(log_path: Optional[str]):
    logging_conf = {
        'version': 1,
        'formatters': {
            'console': {'format': '%(asctime)s - %(levelname)s - %(message)s', 'datefmt': "%H:%M:%S"},
            "file": {"format": "%(asctime)-15s - %(name)-9s - %(levelname)-6s - %(message)s"}
        },
        'handlers': {
            'console': {
                'level': 'INFO',
                'class': 'logging.StreamHandler',
                'formatter': 'console',
                'stream': 'ext://sys.stdout'
            },
        },
        'loggers': {
        },
        "root": {
            'level': 'DEBUG',
            'handlers': ['console']
        },
        'disable_existing_loggers': False
    }
    if log_path:
        logging_conf["handlers"].update({
            'file': {
                'level': 'DEBUG',
                'class': 'logging.handlers.RotatingFileHandler',
                'formatter': 'file',
                'filename': log_path,
                'maxBytes': 1048576,
                'backupCount': 5,
                "encoding": "UTF-8"
            }
        })
        logging_conf.update(
            {
                "root": {
                    'level': 'DEBUG',
                    'handlers': ['console', 'file']
                }
            }
        )

    logging.config.dictConfig(logging_conf)


def build_parser() -> argparse.ArgumentParser:
    # > sample --scheme ROBA --steps 100 --seed 7 --out runs/roba
    # > curve --scheme EM NOBA ROBA --steps 50 100 200 --chains 100000
    # > sweep --scheme ROBA --steps 100
    # > truncation --scheme NBAO RBAO --seed 0
    # > validate-config --config exp.json
    parser = argparse.ArgumentParser(
        description="Splitting integrators for sampling phase-space Langevin "
                    "diffusions, checked against an exact Gaussian oracle.")

    subparsers = parser.add_subparsers(
        title='subcommands', description='valid subcommands',
        dest="subcmd")

    parent_parser = argparse.ArgumentParser(add_help=False)
    parent_parser.add_argument(
        "--config", type=str, metavar='PATH',
        help="JSON experiment config; the flags below override its values")
    parent_parser.add_argument(
        "--seed", type=int, nargs='+', metavar='SEED',
        help="Run seed(s), non-negative integers")
    parent_parser.add_argument(
        "--out", type=str, metavar='DIR',
        help="Output directory for CSV/JSON results and the manifest")
    parent_parser.add_argument(
        "--chains", type=int,
        help="Number of chains sampled in parallel")
    parent_parser.add_argument(
        "--scheme", type=str, nargs='+',
        help="Scheme(s): EM, NOBA, NBAO, NOBAB, ROBA, RBAO, ROBAB")
    parent_parser.add_argument(
        "--steps", type=int, nargs='+', metavar='N',
        help="Number(s) of sampling steps")
    parent_parser.add_argument(
        "--lambda-s", type=float, dest="lambda_s",
        help="Position-noise scale of the reduced schemes (default: tuned per budget)")
    parent_parser.add_argument(
        "--denoise", action="store_true", dest="denoise", default=None,
        help="Apply the final denoising step (default)")
    parent_parser.add_argument(
        "--no-denoise", action="store_false", dest="denoise",
        help="Stop sampling at t=eps")
    parent_parser.add_argument(
        "--provider", type=str,
        help="Score provider: gaussian, zero or external:<cmd>")
    parent_parser.add_argument(
        "--workers", type=int,
        help="Maximum number of work items running at once")
    parent_parser.add_argument(
        "--exact", action="store_true", default=None, dest="exact_moments",
        help="Propagate moments exactly instead of sampling (affine providers only)")

    sample = subparsers.add_parser(
        "sample", parents=[parent_parser],
        help="Draw samples and record their distance to the exact marginal")
    sample.set_defaults(func=_cl_run, experiment='sample')

    curve = subparsers.add_parser(
        "curve", parents=[parent_parser],
        help="Weak error against NFE over the given step budgets")
    curve.set_defaults(func=_cl_run, experiment='error_curve')

    sweep = subparsers.add_parser(
        "sweep", parents=[parent_parser],
        help="Grid search of lambda_s for reduced schemes")
    sweep.add_argument(
        "--lambda-grid", type=float, nargs='+', dest="lambda_grid",
        help="lambda_s values to evaluate (default: around the tuned value)")
    sweep.set_defaults(func=_cl_run, experiment='lambda_sweep')

    truncation = subparsers.add_parser(
        "truncation", parents=[parent_parser],
        help="One-step mean residuals against the Ito-Taylor expansion")
    truncation.add_argument(
        "--t0", type=float,
        help="Reverse time the probe step starts at")
    truncation.add_argument(
        "--h", type=float, nargs='+', dest="h_values",
        help="Decreasing step sizes to probe")
    truncation.set_defaults(func=_cl_run, experiment='truncation')

    validate = subparsers.add_parser(
        "validate-config", parents=[parent_parser],
        help="Parse and validate a config, then print it fully expanded")
    validate.set_defaults(func=_cl_validate_config, experiment=None)

    return parser


_OVERRIDES = {
    # argparse dest -> config key
    'seed': 'seeds',
    'out': 'output_dir',
    'chains': 'n_chains',
    'scheme': 'scheme',
    'steps': 'N',
    'lambda_s': 'lambda_s',
    'denoise': 'denoise',
    'provider': 'provider',
    'workers': 'workers',
    'exact_moments': 'exact_moments',
    'lambda_grid': 'lambda_grid',
    't0': 't0',
    'h_values': 'h_values',
}


def _raw_config(args: argparse.Namespace) -> Dict[str, Any]:
    raw: Dict[str, Any] = read_raw_config(args.config) if args.config else {}

    if args.scheme is not None:
        # scheme names from the command line replace any per-scheme settings
        raw.pop('scheme', None)
    for dest, key in _OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None:
            raw[key] = value
    if args.experiment is not None:
        raw['experiment'] = args.experiment

    return raw


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    return config_from_dict(_raw_config(args))


def _cl_run(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    prepare_output_dir(cfg.output_dir)
    configure_logging(os.path.join(cfg.output_dir, LOG_FILENAME))

    manifest = run_experiment(cfg)
    if manifest['errors']:
        logger.warning("%d work item(s) failed, see %s",
                       len(manifest['errors']), os.path.join(cfg.output_dir, MANIFEST_FILENAME))
        return EXIT_RUNTIME
    return EXIT_OK


def _cl_validate_config(args: argparse.Namespace) -> int:
    if not args.config:
        raise ConfigError("validate-config needs --config", 'config')
    cfg = build_config(args)
    print(format_dataclass_fields(cfg, lambda f: f.name not in ('params', 'data', 'schemes')))
    print(serialize_config(cfg))
    return EXIT_OK


def main(args: List[str]) -> int:
    configure_logging(None)
    parser = build_parser()
    parsed_args = parser.parse_args(args)
    if not (hasattr(parsed_args, 'func') and parsed_args.func):
        parser.print_usage()
        return EXIT_VALIDATION

    try:
        return parsed_args.func(parsed_args)
    except (ConfigError, InvalidParams) as e:
        field = getattr(e, 'field', None)
        logger.error("Invalid configuration%s: %s",
                     f" ({field})" if field else "", e)
        return EXIT_VALIDATION
    except SplittingSamplerException as e:
        logger.error("%s: %s", type(e).__name__, e)
        return EXIT_RUNTIME
    except Exception:
        logger.exception("Unexpected error while running '%s'", parsed_args.subcmd)
        return EXIT_RUNTIME
