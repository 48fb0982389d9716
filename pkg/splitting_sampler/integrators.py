"""
Splitting integrators for the reverse PSLD SDE.

The reverse drift is split into an OU part (O, solved exactly) and two
score-dependent Euler parts: A updates position, B updates momentum. Naive
schemes evaluate the score freshly before each of A and B, reduced schemes
share one evaluation between them and may rescale the position noise by
lambda_s.
"""
import dataclasses
import logging
import math

from typing import (
    Any, Callable, Dict, Iterator, List, NamedTuple, Optional, Tuple
)

import numpy as np

from splitting_sampler.exceptions import ContractError, InvalidParams
from splitting_sampler.psld import (
    JointState, PsldParams, ScoreEval, stationary_sample, validate_params
)
from splitting_sampler.score import RunContext, ScoreProvider, score_provider_call
from splitting_sampler.streams import ChainStreams


logger = logging.getLogger(__name__)


SCHEMES = ('EM', 'NOBA', 'NBAO', 'NOBAB', 'ROBA', 'RBAO', 'ROBAB')
REDUCED_SCHEMES = ('ROBA', 'RBAO', 'ROBAB')
STRIDINGS = ('quadratic', 'uniform')

NFE_PER_STEP: Dict[str, int] = {
    'EM': 1,
    'NOBA': 2,
    'NBAO': 2,
    'NOBAB': 3,
    'ROBA': 1,
    'RBAO': 1,
    'ROBAB': 2,
}

# tuned position-noise scales per sampling budget (number of steps)
DEFAULT_LAMBDA_S: Dict[str, Dict[int, float]] = {
    'ROBA': {50: 1.16, 70: 0.66, 100: 0.37, 150: 0.2, 200: 0.13},
    'RBAO': {50: 0.7, 70: 0.44, 100: 0.3, 150: 0.18, 200: 0.1},
    'ROBAB': {50: 0.2, 70: 0.16, 100: 0.14, 150: 0.12, 200: 0.1},
}


def nfe_per_step(scheme: str) -> int:
    try:
        return NFE_PER_STEP[scheme]
    except KeyError:
        raise InvalidParams(f"Unknown scheme '{scheme}'", 'scheme')


def default_lambda_s(scheme: str, n_steps: int) -> Optional[float]:
    """Tuned lambda_s of the nearest budget on a log scale, ties to the smaller budget."""
    table = DEFAULT_LAMBDA_S.get(scheme)
    if table is None:
        return None
    if n_steps < 1:
        raise InvalidParams("n_steps must be >= 1", 'n_steps')

    budget = min(sorted(table), key=lambda b: abs(math.log(n_steps / b)))
    return table[budget]


@dataclasses.dataclass(frozen=True)
class TimeGrid:
    # forward times, strictly decreasing from t_max to eps
    times: Tuple[float, ...]
    striding: str

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    @property
    def t_max(self) -> float:
        return self.times[0]

    @property
    def eps(self) -> float:
        return self.times[-1]

    def steps(self) -> Iterator[Tuple[int, float, float]]:
        for i in range(self.n_steps):
            yield i, self.times[i], self.times[i + 1]


def build_time_grid(t_max: float, eps: float, n_steps: int,
                    striding: str = 'quadratic') -> TimeGrid:
    if n_steps < 2:
        raise InvalidParams(f"n_steps must be >= 2, got {n_steps}", 'n_steps')
    if eps < 0 or not eps < t_max:
        raise InvalidParams(f"Need 0 <= eps < T, got eps={eps}, T={t_max}", 'eps')
    if striding not in STRIDINGS:
        raise InvalidParams(f"Unknown striding '{striding}'", 'striding')

    u = np.arange(n_steps + 1) / n_steps
    if striding == 'quadratic':
        u = u * u
    ascending = eps + (t_max - eps) * u
    ascending[0] = eps
    ascending[-1] = t_max
    return TimeGrid(tuple(float(v) for v in ascending[::-1]), striding)


@dataclasses.dataclass(frozen=True)
class SchemeSpec:
    scheme: str
    lambda_s: Optional[float] = None
    denoise_last: bool = False

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise InvalidParams(
                f"Unknown scheme '{self.scheme}', expected one of {SCHEMES}", 'scheme')
        if self.lambda_s is not None:
            if self.scheme not in REDUCED_SCHEMES:
                raise InvalidParams(
                    f"lambda_s is only permitted for reduced schemes, not {self.scheme}",
                    'lambda_s')
            if not math.isfinite(self.lambda_s) or self.lambda_s <= 0:
                raise InvalidParams("lambda_s must be > 0", 'lambda_s')

    @property
    def reduced(self) -> bool:
        return self.scheme in REDUCED_SCHEMES

    @property
    def nfe_per_step(self) -> int:
        return NFE_PER_STEP[self.scheme]

    def with_default_lambda(self, n_steps: int) -> 'SchemeSpec':
        if not self.reduced or self.lambda_s is not None:
            return self
        return dataclasses.replace(
            self, lambda_s=default_lambda_s(self.scheme, n_steps))

    def to_json(self) -> Dict[str, Any]:
        return {'scheme': self.scheme, 'lambda_s': self.lambda_s,
                'denoise_last': self.denoise_last}

    @staticmethod
    def from_json(json_object: Dict[str, Any]) -> 'SchemeSpec':
        return SchemeSpec(**json_object)


def total_nfe(spec: SchemeSpec, n_steps: int) -> int:
    return spec.nfe_per_step * n_steps + (1 if spec.denoise_last else 0)


@dataclasses.dataclass(frozen=True)
class StepContext:
    # t is reverse time: the step starts at forward time t_max - t
    t_max: float
    t: float
    h: float

    def __post_init__(self):
        if not self.h > 0:
            raise InvalidParams(f"Step size must be > 0, got {self.h}", 'h')

    @classmethod
    def between(cls, t_max: float, t_from: float, t_to: float) -> 'StepContext':
        """Step from forward time t_from down to t_to."""
        return cls(t_max, t_max - t_from, t_from - t_to)

    @property
    def t_cond(self) -> float:
        return self.t_max - self.t

    @property
    def t_cond_next(self) -> float:
        return self.t_max - (self.t + self.h)

    @property
    def t_bar(self) -> float:
        return ((self.t_max - self.t) + (self.t_max - self.t - self.h)) / 2


class OuCoefficients(NamedTuple):
    decay_x: float
    sigma_x: float
    decay_m: float
    sigma_m: float


def ou_coefficients(p: PsldParams, ctx: StepContext,
                    lambda_s: Optional[float] = None) -> OuCoefficients:
    rate_x = p.beta * p.gamma_cap
    rate_m = p.beta * p.nu
    duration_x = ctx.h if lambda_s is None else (ctx.t_bar * lambda_s)
    return OuCoefficients(
        math.exp(-ctx.h * rate_x / 2),
        math.sqrt(-math.expm1(-duration_x * rate_x)),
        math.exp(-ctx.h * rate_m / 2),
        math.sqrt(p.mass) * math.sqrt(-math.expm1(-ctx.h * rate_m)),
    )


def _check_shapes(s: JointState, se: ScoreEval) -> None:
    if se.sx.shape != s.x.shape or se.sm.shape != s.m.shape:
        raise ContractError(
            f"Score shapes {se.sx.shape}/{se.sm.shape} do not match state "
            f"shape {s.x.shape}")


def step_O(p: PsldParams, s: JointState, ctx: StepContext,
           lambda_s: Optional[float], rng: Any) -> JointState:
    c = ou_coefficients(p, ctx, lambda_s)
    eps_x = rng.standard_normal(s.x.shape)
    eps_m = rng.standard_normal(s.m.shape)
    return JointState(c.decay_x * s.x + c.sigma_x * eps_x,
                      c.decay_m * s.m + c.sigma_m * eps_m, s.t)


def step_A(p: PsldParams, s: JointState, se: ScoreEval, h: float) -> JointState:
    _check_shapes(s, se)
    k = 0.5 * h * p.beta
    x = s.x + k * (2 * p.gamma_cap * s.x - p.m_inv * s.m + 2 * p.gamma_cap * se.sx)
    return JointState(x, s.m, s.t)


def step_B(p: PsldParams, s: JointState, se: ScoreEval, h: float) -> JointState:
    _check_shapes(s, se)
    k = 0.5 * h * p.beta
    m = s.m + k * (s.x + 2 * p.nu * s.m + 2 * p.mass * p.nu * se.sm)
    return JointState(s.x, m, s.t)


def reverse_drift(p: PsldParams, s: JointState,
                  se: ScoreEval) -> Tuple[np.ndarray, np.ndarray]:
    k = 0.5 * p.beta
    fx = k * (p.gamma_cap * s.x - p.m_inv * s.m + 2 * p.gamma_cap * se.sx)
    fm = k * (s.x + p.nu * s.m + 2 * p.mass * p.nu * se.sm)
    return fx, fm


def step_em(p: PsldParams, s: JointState, se: ScoreEval, h: float,
            rng: Any) -> JointState:
    _check_shapes(s, se)
    fx, fm = reverse_drift(p, s, se)
    eps_x = rng.standard_normal(s.x.shape)
    eps_m = rng.standard_normal(s.m.shape)
    x = s.x + h * fx + math.sqrt(h * p.gamma_cap * p.beta) * eps_x
    m = s.m + h * fm + math.sqrt(h * p.mass * p.nu * p.beta) * eps_m
    return JointState(x, m, s.t)


StepFunc = Callable[
    [SchemeSpec, PsldParams, ScoreProvider, JointState, StepContext, Any, RunContext],
    JointState]


def _em(spec, p, provider, s, ctx, rng, run):
    se = score_provider_call(provider, s, ctx.t_cond, run)
    return step_em(p, s, se, ctx.h, rng)


def _noba(spec, p, provider, s, ctx, rng, run):
    s = step_O(p, s, ctx, None, rng)
    s = step_B(p, s, score_provider_call(provider, s, ctx.t_cond, run), ctx.h)
    return step_A(p, s, score_provider_call(provider, s, ctx.t_cond, run), ctx.h)


def _nbao(spec, p, provider, s, ctx, rng, run):
    s = step_B(p, s, score_provider_call(provider, s, ctx.t_cond, run), ctx.h)
    s = step_A(p, s, score_provider_call(provider, s, ctx.t_cond, run), ctx.h)
    return step_O(p, s, ctx, None, rng)


def _nobab(spec, p, provider, s, ctx, rng, run):
    half = 0.5 * ctx.h
    s = step_O(p, s, ctx, None, rng)
    s = step_B(p, s, score_provider_call(provider, s, ctx.t_cond, run), half)
    s = step_A(p, s, score_provider_call(provider, s, ctx.t_cond, run), ctx.h)
    return step_B(p, s, score_provider_call(provider, s, ctx.t_cond, run), half)


def _roba(spec, p, provider, s, ctx, rng, run):
    s = step_O(p, s, ctx, spec.lambda_s, rng)
    se = score_provider_call(provider, s, ctx.t_cond, run)
    s = step_B(p, s, se, ctx.h)
    return step_A(p, s, se, ctx.h)


def _rbao(spec, p, provider, s, ctx, rng, run):
    se = score_provider_call(provider, s, ctx.t_cond, run)
    s = step_B(p, s, se, ctx.h)
    s = step_A(p, s, se, ctx.h)
    return step_O(p, s, ctx, spec.lambda_s, rng)


def _robab(spec, p, provider, s, ctx, rng, run):
    half = 0.5 * ctx.h
    s = step_O(p, s, ctx, spec.lambda_s, rng)
    se = score_provider_call(provider, s, ctx.t_cond, run)
    s = step_B(p, s, se, half)
    s = step_A(p, s, se, ctx.h)
    # second half kick sees the updated position and the next time level
    return step_B(p, s, score_provider_call(provider, s, ctx.t_cond_next, run), half)


_SCHEME_STEPS: Dict[str, StepFunc] = {
    'EM': _em,
    'NOBA': _noba,
    'NBAO': _nbao,
    'NOBAB': _nobab,
    'ROBA': _roba,
    'RBAO': _rbao,
    'ROBAB': _robab,
}


def step_scheme(spec: SchemeSpec, p: PsldParams, provider: ScoreProvider,
                s: JointState, ctx: StepContext, rng: Any,
                run: Optional[RunContext] = None) -> Tuple[JointState, int]:
    """
    One composed step from forward time ctx.t_cond to ctx.t_cond_next.

    :returns: The new state and the number of score evaluations it used
    """
    if spec.lambda_s is not None and not spec.reduced:
        raise InvalidParams(
            f"lambda_s is only permitted for reduced schemes, not {spec.scheme}",
            'lambda_s')
    if run is None:
        run = RunContext()

    before = run.nfe
    out = _SCHEME_STEPS[spec.scheme](spec, p, provider, s, ctx, rng, run)
    return JointState(out.x, out.m, ctx.t_cond_next), run.nfe - before


def denoise_last_step(p: PsldParams, provider: ScoreProvider, s: JointState,
                      run: Optional[RunContext] = None) -> JointState:
    """Euler step of the reverse drift from t=eps to t=0, no noise."""
    if s.t != p.eps_cutoff:
        raise ContractError(
            f"Denoising must start at t=eps={p.eps_cutoff}, got t={s.t}")
    if run is None:
        run = RunContext()

    se = score_provider_call(provider, s, p.eps_cutoff, run)
    fx, fm = reverse_drift(p, s, se)
    return JointState(s.x + p.eps_cutoff * fx, s.m + p.eps_cutoff * fm, 0.0)


@dataclasses.dataclass(eq=False)
class SampleResult:
    state: JointState
    total_nfe: int
    trace: Optional[List[Tuple[float, JointState]]] = None


def sample(p: PsldParams, provider: ScoreProvider, spec: SchemeSpec, grid: TimeGrid,
           n_chains: int, seed: int, trace: bool = False,
           run: Optional[RunContext] = None) -> SampleResult:
    validate_params(p)
    if grid.t_max != p.t_max or grid.eps != p.eps_cutoff:
        raise InvalidParams(
            f"Grid spans [{grid.eps}, {grid.t_max}], expected "
            f"[{p.eps_cutoff}, {p.t_max}]", 'grid')
    if run is None:
        run = RunContext(trace=[] if trace else None)

    streams = ChainStreams(seed, n_chains)
    state = stationary_sample(p, n_chains, streams)
    run.record(state)
    for i, t_from, t_to in grid.steps():
        ctx = StepContext.between(p.t_max, t_from, t_to)
        state, _ = step_scheme(spec, p, provider, state, ctx, streams, run)
        # pin to the grid value so the final time is exactly eps
        state.t = t_to
        state.check_finite(i)
        logger.debug("Step %d: t_cond=%s h=%s", i, ctx.t_cond, ctx.h)
        run.record(state)

    if spec.denoise_last:
        state = denoise_last_step(p, provider, state, run)
        state.check_finite(grid.n_steps)
        run.record(state)

    return SampleResult(state, run.nfe, run.trace)
