import dataclasses
import json
import logging
import math

from typing import Any, Dict, List, Optional, Tuple

from splitting_sampler.analysis import METRICS
from splitting_sampler.exceptions import ConfigError, InvalidParams
from splitting_sampler.helpers import canonical_json, sha256_text
from splitting_sampler.integrators import REDUCED_SCHEMES, STRIDINGS, SchemeSpec
from splitting_sampler.psld import (
    GaussianDataSpec, PsldParams, PRESETS, validate_params
)


logger = logging.getLogger(__name__)


EXPERIMENTS = ('sample', 'error_curve', 'lambda_sweep', 'truncation')
CONFIG_VERSION = 1

_TOP_KEYS = frozenset((
    'version', 'type', 'preset', 'params', 'data', 'scheme', 'lambda_s', 'denoise',
    'striding', 'N', 'n_chains', 'seeds', 'experiment', 'output_dir', 'provider',
    'metric', 'exact_moments', 'lambda_grid', 'h_values', 't0', 'workers',
))
_PARAM_KEYS = frozenset(f.name for f in dataclasses.fields(PsldParams))
_DATA_KEYS = frozenset(('dim', 'mu0_x', 'var0_x'))
_SCHEME_KEYS = frozenset(('scheme', 'lambda_s', 'denoise_last'))

DEFAULT_MEAN = 0.5
DEFAULT_VAR = 0.25


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    params: PsldParams
    data: GaussianDataSpec
    schemes: Tuple[SchemeSpec, ...]
    steps: Tuple[int, ...]
    preset: Optional[str] = 'cifar10'
    striding: str = 'quadratic'
    n_chains: int = 100_000
    seeds: Tuple[int, ...] = (0,)
    experiment: str = 'sample'
    output_dir: str = 'runs'
    provider: str = 'gaussian'
    metric: str = 'w2'
    exact_moments: bool = False
    lambda_grid: Optional[Tuple[float, ...]] = None
    h_values: Tuple[float, ...] = (0.04, 0.02, 0.01, 0.005)
    t0: float = 0.5
    workers: int = 1

    def to_json(self) -> Dict[str, Any]:
        return {
            'version': CONFIG_VERSION,
            'type': type(self).__name__,
            'preset': self.preset,
            'params': self.params.to_json(),
            'data': self.data.to_json(),
            'scheme': [s.to_json() for s in self.schemes],
            'striding': self.striding,
            'N': list(self.steps),
            'n_chains': self.n_chains,
            'seeds': list(self.seeds),
            'experiment': self.experiment,
            'output_dir': self.output_dir,
            'provider': self.provider,
            'metric': self.metric,
            'exact_moments': self.exact_moments,
            'lambda_grid': None if self.lambda_grid is None else list(self.lambda_grid),
            'h_values': list(self.h_values),
            't0': self.t0,
            'workers': self.workers,
        }

    def config_hash(self) -> str:
        return sha256_text(canonical_json(self.to_json()))


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_real(value: Any) -> bool:
    return (_is_int(value) or isinstance(value, float)) and math.isfinite(value)


def _as_list(value: Any) -> List[Any]:
    return list(value) if isinstance(value, list) else [value]


def _check_keys(obj: Any, allowed: frozenset, where: str) -> Dict[str, Any]:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be an object", where)
    unknown = sorted(set(obj) - allowed)
    if unknown:
        field = unknown[0] if where == 'config' else f"{where}.{unknown[0]}"
        raise ConfigError(f"Unknown config key(s) {unknown} in {where}", field)
    return obj


def _int_list(value: Any, field: str, minimum: int) -> Tuple[int, ...]:
    values = _as_list(value)
    if not values or not all(_is_int(v) and v >= minimum for v in values):
        raise ConfigError(
            f"{field} must be an integer >= {minimum} or a non-empty list of them", field)
    return tuple(values)


def _real_list(value: Any, field: str) -> Tuple[float, ...]:
    values = _as_list(value)
    if not values or not all(_is_real(v) and v > 0 for v in values):
        raise ConfigError(f"{field} must be a positive number or a non-empty list of them",
                          field)
    return tuple(float(v) for v in values)


def _parse_params(raw: Dict[str, Any]) -> Tuple[Optional[str], Dict[str, Any]]:
    preset = raw.get('preset', 'cifar10')
    values: Dict[str, Any] = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(
                f"Unknown preset '{preset}', expected one of {sorted(PRESETS)}", 'preset')
        values.update(PRESETS[preset])
    values.update(_check_keys(raw.get('params', {}), _PARAM_KEYS, 'params'))
    return preset, values


def _parse_data(raw: Dict[str, Any], param_values: Dict[str, Any]) -> GaussianDataSpec:
    data = _check_keys(raw.get('data', {}), _DATA_KEYS, 'data')
    dims = {}
    if 'dim' in param_values:
        dims['params.dim'] = param_values['dim']
    if 'dim' in data:
        dims['data.dim'] = data['dim']
    for key in ('mu0_x', 'var0_x'):
        if isinstance(data.get(key), list):
            dims[f'data.{key}'] = len(data[key])
    if len(set(dims.values())) > 1:
        raise ConfigError(f"Conflicting dimensions: {dims}", 'data.dim')
    dim = next(iter(dims.values()), PsldParams.dim)
    if not _is_int(dim) or dim < 1:
        raise ConfigError("dim must be a positive integer", 'data.dim')

    entries = []
    for key, default in (('mu0_x', DEFAULT_MEAN), ('var0_x', DEFAULT_VAR)):
        value = data.get(key, default)
        values = value if isinstance(value, list) else [value] * dim
        if not all(_is_real(v) for v in values):
            raise ConfigError(f"{key} entries must be finite numbers", f'data.{key}')
        entries.append(values)

    param_values['dim'] = dim
    try:
        return GaussianDataSpec(entries[0], entries[1])
    except InvalidParams as e:
        raise ConfigError(str(e), f'data.{e.field}')


def _parse_schemes(raw: Dict[str, Any], steps: Tuple[int, ...]) -> Tuple[SchemeSpec, ...]:
    default_lambda = raw.get('lambda_s')
    if default_lambda is not None and not _is_real(default_lambda):
        raise ConfigError("lambda_s must be a number", 'lambda_s')
    denoise = raw.get('denoise', True)
    if not isinstance(denoise, bool):
        raise ConfigError("denoise must be true or false", 'denoise')

    specs = []
    for entry in _as_list(raw.get('scheme', 'ROBA')):
        if isinstance(entry, str):
            entry = {'scheme': entry}
        values = dict(_check_keys(entry, _SCHEME_KEYS, 'scheme'))
        values.setdefault('denoise_last', denoise)
        if values.get('lambda_s') is None and default_lambda is not None:
            # a global lambda_s only applies where it is permitted
            values['lambda_s'] = default_lambda if values.get('scheme') in REDUCED_SCHEMES else None
        try:
            spec = SchemeSpec(**values)
        except (InvalidParams, TypeError) as e:
            raise ConfigError(str(e), 'scheme')
        if len(steps) == 1:
            spec = spec.with_default_lambda(steps[0])
        specs.append(spec)

    if not specs:
        raise ConfigError("At least one scheme is required", 'scheme')
    return tuple(specs)


def config_from_dict(raw: Dict[str, Any]) -> ExperimentConfig:
    raw = _check_keys(raw, _TOP_KEYS, 'config')
    preset, param_values = _parse_params(raw)
    data = _parse_data(raw, param_values)
    try:
        params = validate_params(PsldParams(**param_values))
    except InvalidParams as e:
        raise ConfigError(str(e), f'params.{e.field}')

    steps = tuple(sorted(set(_int_list(raw.get('N', 100), 'N', 2))))
    schemes = _parse_schemes(raw, steps)

    experiment = raw.get('experiment', 'sample')
    if experiment not in EXPERIMENTS:
        raise ConfigError(
            f"Unknown experiment '{experiment}', expected one of {EXPERIMENTS}", 'experiment')
    if experiment == 'lambda_sweep' and not all(s.reduced for s in schemes):
        raise ConfigError("lambda_sweep needs reduced schemes only", 'scheme')

    striding = raw.get('striding', 'quadratic')
    if striding not in STRIDINGS:
        raise ConfigError(f"Unknown striding '{striding}'", 'striding')
    metric = raw.get('metric', 'w2')
    if metric not in METRICS:
        raise ConfigError(f"Unknown metric '{metric}'", 'metric')

    provider = raw.get('provider', 'gaussian')
    if not isinstance(provider, str) or not (
            provider in ('gaussian', 'zero') or
            (provider.startswith('external:') and provider[len('external:'):].strip())):
        raise ConfigError(
            "provider must be 'gaussian', 'zero' or 'external:<cmd>'", 'provider')
    exact = raw.get('exact_moments', False)
    if not isinstance(exact, bool):
        raise ConfigError("exact_moments must be true or false", 'exact_moments')
    if experiment == 'truncation' and provider.startswith('external:'):
        raise ConfigError("truncation probes need an in-process provider", 'provider')
    if exact and provider.startswith('external:'):
        raise ConfigError("exact_moments needs an in-process provider", 'exact_moments')

    n_chains = raw.get('n_chains', 100_000)
    if not _is_int(n_chains) or n_chains < 2:
        raise ConfigError("n_chains must be an integer >= 2", 'n_chains')
    workers = raw.get('workers', 1)
    if not _is_int(workers) or workers < 1:
        raise ConfigError("workers must be an integer >= 1", 'workers')
    seeds = _int_list(raw.get('seeds', 0), 'seeds', 0)

    output_dir = raw.get('output_dir', 'runs')
    if not isinstance(output_dir, str) or not output_dir:
        raise ConfigError("output_dir must be a non-empty path", 'output_dir')

    lambda_grid = raw.get('lambda_grid')
    if lambda_grid is not None:
        lambda_grid = _real_list(lambda_grid, 'lambda_grid')
    h_values = _real_list(raw.get('h_values', [0.04, 0.02, 0.01, 0.005]), 'h_values')
    if any(b >= a for a, b in zip(h_values, h_values[1:])):
        raise ConfigError(f"h_values must be strictly decreasing: {list(h_values)}", 'h_values')
    t0 = raw.get('t0', 0.5)
    if not _is_real(t0) or t0 < 0:
        raise ConfigError("t0 must be a non-negative number", 't0')
    if experiment == 'truncation' and t0 + max(h_values) > params.t_max:
        raise ConfigError(f"t0 + max(h_values) exceeds t_max={params.t_max}", 't0')

    return ExperimentConfig(
        params=params, data=data, schemes=schemes, steps=steps, preset=preset,
        striding=striding, n_chains=n_chains, seeds=seeds, experiment=experiment,
        output_dir=output_dir, provider=provider, metric=metric, exact_moments=exact,
        lambda_grid=lambda_grid, h_values=h_values, t0=float(t0), workers=workers)


def parse_raw_config(text: str) -> Dict[str, Any]:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"line {e.lineno}, column {e.colno}: {e.msg}", line=e.lineno)
    if not isinstance(raw, dict):
        raise ConfigError("Config must be a JSON object")
    return raw


def read_raw_config(path: str) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding='utf-8') as f:
            contents = f.read()
    except OSError as e:
        raise ConfigError(f"Could not read config '{path}': {e}")

    try:
        return parse_raw_config(contents)
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}", e.field, e.line)


def loads_config(text: str) -> ExperimentConfig:
    return config_from_dict(parse_raw_config(text))


def load_config(path: str) -> ExperimentConfig:
    raw = read_raw_config(path)
    try:
        cfg = config_from_dict(raw)
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}", e.field, e.line)
    logger.debug("Loaded config %s (%s)", path, cfg.config_hash())
    return cfg


def serialize_config(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_json(), indent=2)


def save_config(cfg: ExperimentConfig, path: str) -> None:
    with open(path, "w", encoding='utf-8') as f:
        f.write(serialize_config(cfg))
