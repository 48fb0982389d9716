"""
Quantitative checks of the samplers against the exact Gaussian oracle:
Gaussian Wasserstein-2, weak-error curves, one-step truncation residuals
and lambda_s grid search.
"""
import dataclasses
import logging
import math

from typing import Any, Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from splitting_sampler.exceptions import ContractError, InvalidParams, NonPSDError
from splitting_sampler.integrators import (
    SchemeSpec, StepContext, TimeGrid, build_time_grid, default_lambda_s,
    denoise_last_step, reverse_drift, sample, step_scheme
)
from splitting_sampler.psld import (
    GaussianDataSpec, GaussianMoments, JointState, PsldParams,
    forward_moments, perturbation_sample, precision_blocks, stationary_moments
)
from splitting_sampler.score import (
    GaussianScoreProvider, RunContext, ScoreProvider
)
from splitting_sampler.streams import ChainStreams, ZeroNoise


logger = logging.getLogger(__name__)


METRICS = ('w2', 'mean_abs', 'cov_fro')
# multipliers applied to the tuned lambda_s of a budget for the default sweep
DEFAULT_SWEEP_FACTORS = (0.25, 0.5, 0.75, 1.0, 1.5, 2.0)


@dataclasses.dataclass
class ErrorCurve:
    # (x, error) with x the NFE budget, or lambda_s for sweeps
    points: List[Tuple[float, float]]
    scheme: SchemeSpec
    metric: str
    axis: str = 'nfe'

    def __post_init__(self):
        xs = [x for x, _ in self.points]
        if any(b <= a for a, b in zip(xs, xs[1:])):
            raise ContractError(f"{self.axis} must be strictly increasing: {xs}")

    @property
    def xs(self) -> List[float]:
        return [x for x, _ in self.points]

    @property
    def errors(self) -> List[float]:
        return [e for _, e in self.points]

    def to_json(self) -> Dict[str, Any]:
        return {
            'scheme': self.scheme.to_json(),
            'metric': self.metric,
            'axis': self.axis,
            'points': [list(pt) for pt in self.points],
        }


@dataclasses.dataclass
class TruncationReport:
    scheme: str
    t0: float
    h_values: Tuple[float, ...]
    residual_x: Tuple[float, ...]
    residual_m: Tuple[float, ...]
    cov_residual: Tuple[float, ...]
    fitted_slope_x: float
    fitted_slope_m: float

    def to_json(self) -> Dict[str, Any]:
        def finite_or_none(v: float) -> Optional[float]:
            return v if math.isfinite(v) else None

        return {
            'scheme': self.scheme,
            't0': self.t0,
            'h_values': list(self.h_values),
            'residual_x': list(self.residual_x),
            'residual_m': list(self.residual_m),
            'cov_residual': list(self.cov_residual),
            'fitted_slope_x': finite_or_none(self.fitted_slope_x),
            'fitted_slope_m': finite_or_none(self.fitted_slope_m),
        }


def empirical_moments(samples: JointState) -> GaussianMoments:
    n = samples.n_chains
    if n < 2:
        raise InvalidParams(f"Need at least 2 chains, got {n}", 'n_chains')

    z = samples.stacked()
    mu = z.mean(axis=0)
    dz = z - mu
    sigma = np.einsum('ndi,ndj->dij', dz, dz) / (n - 1)
    return GaussianMoments(mu, sigma)


def sqrtm_psd_2x2(m: np.ndarray) -> np.ndarray:
    """
    Principal square root of a stack of 2x2 PSD matrices:
    sqrt(M) = (M + s I) / sqrt(tr M + 2 s) with s = sqrt(det M).
    """
    det = m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]
    s = np.sqrt(np.maximum(det, 0.0))
    tau = np.sqrt(np.maximum(m[..., 0, 0] + m[..., 1, 1] + 2 * s, 0.0))
    root = m + s[..., None, None] * np.eye(2)
    safe = np.where(tau > 0, tau, 1.0)
    return np.where((tau > 0)[..., None, None], root / safe[..., None, None], 0.0)


def gaussian_w2(a: GaussianMoments, b: GaussianMoments) -> float:
    if a.mu.shape != b.mu.shape:
        raise ContractError(f"Dimension mismatch: {a.mu.shape} vs {b.mu.shape}")
    for moments in (a, b):
        try:
            moments.check_psd()
        except NonPSDError:
            raise NonPSDError("gaussian_w2 needs PSD covariance blocks")

    root_b = sqrtm_psd_2x2(b.sigma)
    inner = root_b @ a.sigma @ root_b
    inner = 0.5 * (inner + inner.transpose(0, 2, 1))
    cross = sqrtm_psd_2x2(inner)
    trace = np.trace(a.sigma, axis1=1, axis2=2) + np.trace(b.sigma, axis1=1, axis2=2) \
        - 2 * np.trace(cross, axis1=1, axis2=2)
    w2_sq = float(np.sum((a.mu - b.mu) ** 2) + np.sum(trace))
    return math.sqrt(max(w2_sq, 0.0))


def mean_abs_error(a: GaussianMoments, b: GaussianMoments) -> float:
    """Euclidean error of the position mean."""
    return float(np.linalg.norm(a.mu[:, 0] - b.mu[:, 0]))


def cov_fro_error(a: GaussianMoments, b: GaussianMoments) -> float:
    return float(np.sqrt(np.sum((a.sigma - b.sigma) ** 2)))


_METRIC_FUNCS: Dict[str, Callable[[GaussianMoments, GaussianMoments], float]] = {
    'w2': gaussian_w2,
    'mean_abs': mean_abs_error,
    'cov_fro': cov_fro_error,
}


def distribution_error(metric: str, estimate: GaussianMoments,
                       target: GaussianMoments) -> float:
    try:
        func = _METRIC_FUNCS[metric]
    except KeyError:
        raise InvalidParams(f"Unknown metric '{metric}'", 'metric')
    return func(estimate, target)


def target_moments(p: PsldParams, data: GaussianDataSpec,
                   spec: SchemeSpec) -> GaussianMoments:
    return forward_moments(p, data, 0.0 if spec.denoise_last else p.eps_cutoff)


class _ProbeNoise:
    """
    Noise for the five probe chains of _propagate_affine: the first draw of a
    step (position noise) is 1 on chain 3, the second (momentum noise) is 1
    on chain 4, everything else is 0.
    """

    def __init__(self):
        self._draws = 0

    def standard_normal(self, size: Sequence[int]) -> np.ndarray:
        out = np.zeros(tuple(size))
        if self._draws > 1:
            raise ContractError("A composed step drew more than one noise pair")
        out[3 + self._draws] = 1.0
        self._draws += 1
        return out


def _propagate_affine(apply: Callable[[JointState, Any], JointState],
                      moments: GaussianMoments, t: float) -> GaussianMoments:
    # an affine step z' = A z + b + C eps maps N(mu, S) to N(A mu + b, A S A^T + C C^T)
    dim = moments.dim
    probes = np.broadcast_to(moments.mu, (5, dim, 2)).copy()
    probes[1, :, 0] += 1.0
    probes[2, :, 1] += 1.0
    state = JointState(probes[..., 0].copy(), probes[..., 1].copy(), t)
    out = apply(state, _ProbeNoise()).stacked()

    shift = out[0]
    lin = np.stack([out[1] - shift, out[2] - shift], axis=-1)
    load = np.stack([out[3] - shift, out[4] - shift], axis=-1)
    sigma = lin @ moments.sigma @ lin.transpose(0, 2, 1) + load @ load.transpose(0, 2, 1)
    return GaussianMoments(shift, 0.5 * (sigma + sigma.transpose(0, 2, 1)))


def propagate_moments(p: PsldParams, provider: ScoreProvider, spec: SchemeSpec,
                      grid: TimeGrid,
                      run: Optional[RunContext] = None) -> GaussianMoments:
    """
    Exact law of the sampler's output for an affine score provider, starting
    from the stationary distribution. No sampling noise.
    """
    if not getattr(provider, 'affine', False):
        raise ContractError("Exact moment propagation needs an affine score provider")
    if run is None:
        run = RunContext()

    moments = stationary_moments(p)
    for _, t_from, t_to in grid.steps():
        ctx = StepContext.between(p.t_max, t_from, t_to)
        moments = _propagate_affine(
            lambda s, rng: step_scheme(spec, p, provider, s, ctx, rng, run)[0],
            moments, t_from)

    if spec.denoise_last:
        moments = _propagate_affine(
            lambda s, rng: denoise_last_step(p, provider, s, run),
            moments, p.eps_cutoff)

    return moments


def terminal_moments(p: PsldParams, provider: ScoreProvider, spec: SchemeSpec,
                     grid: TimeGrid, n_chains: int, seed: int,
                     exact: bool = False) -> Tuple[GaussianMoments, int]:
    if exact:
        run = RunContext()
        return propagate_moments(p, provider, spec, grid, run), run.nfe

    result = sample(p, provider, spec, grid, n_chains, seed)
    return empirical_moments(result.state), result.total_nfe


def weak_error_curve(p: PsldParams, data: GaussianDataSpec, spec: SchemeSpec,
                     budgets: Sequence[int], n_chains: int, seed: int,
                     striding: str = 'quadratic', metric: str = 'w2',
                     exact: bool = False,
                     provider: Optional[ScoreProvider] = None,
                     budget_lambda: bool = False) -> ErrorCurve:
    """
    Terminal error against the exact marginal for each step budget.

    :params budget_lambda: Give a reduced scheme without lambda_s the tuned
        value of each budget instead of naive position noise
    """
    if not budgets:
        raise InvalidParams("No budgets given", 'N')
    if any(b <= a for a, b in zip(budgets, budgets[1:])):
        raise InvalidParams(f"Budgets must be sorted ascending: {budgets}", 'N')
    if provider is None:
        provider = GaussianScoreProvider(p, data)

    target = target_moments(p, data, spec)
    points: List[Tuple[float, float]] = []
    for n_steps in budgets:
        grid = build_time_grid(p.t_max, p.eps_cutoff, n_steps, striding)
        trial = spec.with_default_lambda(n_steps) if budget_lambda else spec
        estimate, nfe = terminal_moments(p, provider, trial, grid, n_chains, seed, exact)
        error = distribution_error(metric, estimate, target)
        logger.debug("%s N=%d: %s=%s", spec.scheme, n_steps, metric, error)
        points.append((nfe, error))

    return ErrorCurve(points, spec, metric)


def default_lambda_grid(scheme: str, n_steps: int) -> Tuple[float, ...]:
    center = default_lambda_s(scheme, n_steps)
    if center is None:
        raise InvalidParams(f"{scheme} has no lambda_s", 'scheme')
    return tuple(center * f for f in DEFAULT_SWEEP_FACTORS)


def lambda_sweep(p: PsldParams, data: GaussianDataSpec, spec: SchemeSpec,
                 n_steps: int, lambdas: Sequence[float], n_chains: int, seed: int,
                 striding: str = 'quadratic', metric: str = 'w2',
                 exact: bool = False,
                 provider: Optional[ScoreProvider] = None) -> Tuple[float, ErrorCurve]:
    """
    Weak error at a fixed budget for every lambda_s on the grid.

    :returns: Best lambda_s (ties go to the smaller value) and the error curve
    """
    if not spec.reduced:
        raise InvalidParams(f"lambda_sweep needs a reduced scheme, got {spec.scheme}",
                            'scheme')
    if not lambdas:
        raise InvalidParams("Empty lambda_s grid", 'lambda_grid')
    if provider is None:
        provider = GaussianScoreProvider(p, data)

    target = target_moments(p, data, spec)
    grid = build_time_grid(p.t_max, p.eps_cutoff, n_steps, striding)
    points: List[Tuple[float, float]] = []
    for lam in sorted(set(float(v) for v in lambdas)):
        trial = dataclasses.replace(spec, lambda_s=lam)
        estimate, _ = terminal_moments(p, provider, trial, grid, n_chains, seed, exact)
        points.append((lam, distribution_error(metric, estimate, target)))

    best_lambda, best_error = points[0]
    for lam, error in points[1:]:
        if error < best_error:
            best_lambda, best_error = lam, error

    return best_lambda, ErrorCurve(points, spec, metric, axis='lambda_s')


def fit_loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Least-squares slope of log(ys) against log(xs); nan if any y is not positive."""
    ys_arr = np.asarray(ys, dtype=float)
    if len(xs) < 2 or np.any(ys_arr <= 0):
        return float('nan')
    slope, _ = np.polyfit(np.log(np.asarray(xs, dtype=float)), np.log(ys_arr), 1)
    return float(slope)


def ito_taylor_mean(p: PsldParams, provider: ScoreProvider, state: JointState,
                    ctx: StepContext) -> Tuple[np.ndarray, np.ndarray]:
    """
    Second-order Ito-Taylor prediction of the mean after one reverse step:
    z + h f + h^2/2 (df/dt + J_f f), per chain. The diffusion is constant so
    no second-order Ito correction enters the mean. Needs a provider exposing
    jacobian() and time_derivative().
    """
    tau = ctx.t_cond
    h = ctx.h
    se = provider.score(state, tau)
    jac = provider.jacobian(tau)
    dsx_dtau, dsm_dtau = provider.time_derivative(state, tau)
    fx, fm = reverse_drift(p, state, se)

    k = 0.5 * p.beta
    cx = 2 * p.gamma_cap
    cm = 2 * p.mass * p.nu
    # reverse time runs against forward time
    dfx_dt = -k * cx * dsx_dtau
    dfm_dt = -k * cm * dsm_dtau
    s_xx, s_xm = jac[:, 0, 0], jac[:, 0, 1]
    s_mx, s_mm = jac[:, 1, 0], jac[:, 1, 1]
    jfx = k * ((p.gamma_cap + cx * s_xx) * fx + (-p.m_inv + cx * s_xm) * fm)
    jfm = k * ((1 + cm * s_mx) * fx + (p.nu + cm * s_mm) * fm)

    x = state.x + h * fx + 0.5 * h * h * (dfx_dt + jfx)
    m = state.m + h * fm + 0.5 * h * h * (dfm_dt + jfm)
    return x, m


def truncation_residual(p: PsldParams, data: GaussianDataSpec, spec: SchemeSpec,
                        t0: float, h_values: Sequence[float], n_chains: int,
                        seed: int,
                        provider: Optional[ScoreProvider] = None) -> TruncationReport:
    """
    One composed step from the exact marginal at forward time T - t0, compared
    against the second-order Ito-Taylor mean.

    The mean residual uses a noise-free step: for affine scores every sub-step
    is affine in the noise, so the noise-free output is the exact conditional
    mean and only the spread of the start states remains. The covariance
    residual uses real noise and is reported only.
    """
    h_values = tuple(float(h) for h in h_values)
    if not h_values or any(h <= 0 for h in h_values):
        raise InvalidParams("h_values must be positive", 'h_values')
    if any(b >= a for a, b in zip(h_values, h_values[1:])):
        raise InvalidParams("h_values must be strictly decreasing", 'h_values')
    if t0 < 0 or t0 + h_values[0] > p.t_max:
        raise InvalidParams(
            f"t0 + max(h) = {t0 + h_values[0]} exceeds T = {p.t_max}", 't0')
    if provider is None:
        provider = GaussianScoreProvider(p, data)

    start = perturbation_sample(p, data, p.t_max - t0, n_chains,
                                ChainStreams(seed, n_chains))
    residual_x: List[float] = []
    residual_m: List[float] = []
    cov_residual: List[float] = []
    for h in h_values:
        ctx = StepContext(p.t_max, t0, h)
        run = RunContext()
        mean_step, _ = step_scheme(spec, p, provider, start, ctx, ZeroNoise(), run)
        pred_x, pred_m = ito_taylor_mean(p, provider, start, ctx)
        residual_x.append(float(np.linalg.norm(np.mean(mean_step.x - pred_x, axis=0))))
        residual_m.append(float(np.linalg.norm(np.mean(mean_step.m - pred_m, axis=0))))

        noisy, _ = step_scheme(spec, p, provider, start, ctx,
                               ChainStreams(seed, n_chains, stream=1), run)
        reference = forward_moments(p, data, max(ctx.t_cond_next, 0.0))
        cov_residual.append(cov_fro_error(empirical_moments(noisy), reference))

    return TruncationReport(
        spec.scheme, t0, h_values, tuple(residual_x), tuple(residual_m),
        tuple(cov_residual),
        fit_loglog_slope(h_values, residual_x), fit_loglog_slope(h_values, residual_m))


class ScoreReuseGap(NamedTuple):
    measured: np.ndarray
    analytic: np.ndarray
    stderr: np.ndarray


def score_reuse_gap(p: PsldParams, data: GaussianDataSpec, t0: float, h: float,
                    n_chains: int, seed: int) -> ScoreReuseGap:
    """
    Mean position difference per dimension between one NBAO and one RBAO step
    sharing start states and noise, and its closed form on the Gaussian oracle.

    The steps differ only in the score seen by the A kick: NBAO re-evaluates it
    after the momentum kick. With P the precision at T - t0 and E[s^m] = 0 under
    the marginal, the mean gap is
    e^{-h beta Gamma / 2} h beta Gamma (-P_xm) (h beta / 2) (mu_x + 2 nu mu_m).
    """
    provider = GaussianScoreProvider(p, data)
    start = perturbation_sample(p, data, p.t_max - t0, n_chains,
                                ChainStreams(seed, n_chains))
    ctx = StepContext(p.t_max, t0, h)
    naive, _ = step_scheme(SchemeSpec('NBAO'), p, provider, start, ctx,
                           ChainStreams(seed, n_chains, stream=1))
    reduced, _ = step_scheme(SchemeSpec('RBAO'), p, provider, start, ctx,
                             ChainStreams(seed, n_chains, stream=1))
    diff = naive.x - reduced.x
    measured = diff.mean(axis=0)
    stderr = diff.std(axis=0, ddof=1) / math.sqrt(n_chains)

    moments = forward_moments(p, data, ctx.t_cond)
    prec = precision_blocks(moments, ctx.t_cond)
    kick = 0.5 * h * p.beta * (moments.mu[:, 0] + 2 * p.nu * moments.mu[:, 1])
    analytic = math.exp(-0.5 * h * p.beta * p.gamma_cap) * h * p.beta * p.gamma_cap \
        * (-prec[:, 0, 1]) * kick
    return ScoreReuseGap(measured, analytic, stderr)
