"""
Phase-space Langevin diffusion (PSLD) forward process.

Every matrix of the process is a 2x2 block acting on the (x_i, m_i) pair of a
single dimension, Kronecker the identity, so all moment computations below
work on [d, 2, 2] stacks of blocks.
"""
import dataclasses
import logging
import math

from typing import Any, Dict, Tuple

import numpy as np

from splitting_sampler.exceptions import (
    ContractError, DegenerateMarginal, InvalidParams, NonPSDError, NonFiniteState
)


logger = logging.getLogger(__name__)


CHOLESKY_JITTER = 1e-9
# exp(A t) switches to the power series of cosh/sinh once the eigenvalue gap
# times t is this small (covers the 1e-8 coincidence band with margin)
SERIES_THRESHOLD = 1e-4
SERIES_TERMS = 10


@dataclasses.dataclass(frozen=True)
class PsldParams:
    beta: float = 8.0
    gamma_cap: float = 0.01
    nu: float = 4.01
    m_inv: float = 4.0
    gamma_init: float = 0.04
    dim: int = 2
    t_max: float = 1.0
    eps_cutoff: float = 1e-3

    @property
    def mass(self) -> float:
        return 1.0 / self.m_inv

    def to_json(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @staticmethod
    def from_json(json_object: Dict[str, Any]) -> 'PsldParams':
        return PsldParams(**json_object)


PRESETS: Dict[str, Dict[str, float]] = {
    'cifar10': {'gamma_cap': 0.01, 'nu': 4.01},
    'celeba64': {'gamma_cap': 0.005, 'nu': 4.005},
}


def preset_params(name: str, **overrides: Any) -> PsldParams:
    try:
        preset = PRESETS[name]
    except KeyError:
        raise InvalidParams(f"Unknown preset '{name}'!", 'preset')

    values: Dict[str, Any] = dict(preset)
    values.update(overrides)
    return validate_params(PsldParams(**values))


_POSITIVE_FIELDS = (
    'beta', 'gamma_cap', 'nu', 'm_inv', 'gamma_init', 't_max', 'eps_cutoff')


def validate_params(p: PsldParams) -> PsldParams:
    for name in _POSITIVE_FIELDS:
        value = getattr(p, name)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InvalidParams(f"{name} must be a real number", name)
        if not math.isfinite(value) or value <= 0:
            raise InvalidParams(f"{name} must be > 0", name)

    if isinstance(p.dim, bool) or not isinstance(p.dim, int) or p.dim < 1:
        raise InvalidParams("dim must be a positive integer", 'dim')
    if not p.eps_cutoff < p.t_max:
        raise InvalidParams("eps_cutoff < t_max violated", 'eps_cutoff')

    return p


@dataclasses.dataclass(frozen=True)
class Mat2:
    a11: float
    a12: float
    a21: float
    a22: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.a11, self.a12, self.a21, self.a22)):
            raise ValueError(f"Mat2 entries must be finite: {self}")

    @classmethod
    def identity(cls) -> 'Mat2':
        return cls(1.0, 0.0, 0.0, 1.0)

    @classmethod
    def diag(cls, a: float, b: float) -> 'Mat2':
        return cls(a, 0.0, 0.0, b)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> 'Mat2':
        return cls(float(arr[0, 0]), float(arr[0, 1]),
                   float(arr[1, 0]), float(arr[1, 1]))

    def as_array(self) -> np.ndarray:
        return np.array([[self.a11, self.a12], [self.a21, self.a22]])

    def __matmul__(self, other: 'Mat2') -> 'Mat2':
        return Mat2(
            self.a11 * other.a11 + self.a12 * other.a21,
            self.a11 * other.a12 + self.a12 * other.a22,
            self.a21 * other.a11 + self.a22 * other.a21,
            self.a21 * other.a12 + self.a22 * other.a22,
        )


def drift_matrix(p: PsldParams) -> Mat2:
    half_beta = 0.5 * p.beta
    return Mat2(-half_beta * p.gamma_cap, half_beta * p.m_inv,
                -half_beta, -half_beta * p.nu)


def diffusion_matrix(p: PsldParams) -> Mat2:
    return Mat2.diag(math.sqrt(p.gamma_cap * p.beta),
                     math.sqrt(p.mass * p.nu * p.beta))


def stationary_covariance(p: PsldParams) -> np.ndarray:
    return np.diag([1.0, p.mass])


def _cosh_sinhc_series(u: float) -> Tuple[float, float]:
    # sum u^k/(2k)! and sum u^k/(2k+1)!
    c = 0.0
    s = 0.0
    term = 1.0
    for k in range(SERIES_TERMS):
        c += term
        term_odd = term / (2 * k + 1)
        s += term_odd
        term = term_odd * u / (2 * k + 2)

    return c, s


def mat2_exp(a: Mat2, t: float) -> Mat2:
    """
    exp(A t) in closed form.

    With s = tr(A)/2 and B = A - s I, B^2 = delta I where delta is the squared
    half eigenvalue gap, so exp(A t) = e^{s t} (C I + t S B) with
    C = cosh(sqrt(delta) t), S = sinh(sqrt(delta) t) / (sqrt(delta) t)
    (cos/sin for delta < 0). Near-coincident eigenvalues use the series of C, S.
    """
    if not math.isfinite(t):
        raise ValueError(f"t must be finite, got {t}")

    s = 0.5 * (a.a11 + a.a22)
    b11 = 0.5 * (a.a11 - a.a22)
    delta = b11 * b11 + a.a12 * a.a21
    u = delta * t * t
    if abs(u) < SERIES_THRESHOLD:
        c, sinhc = _cosh_sinhc_series(u)
    elif u > 0:
        q = math.sqrt(u)
        c, sinhc = math.cosh(q), math.sinh(q) / q
    else:
        q = math.sqrt(-u)
        c, sinhc = math.cos(q), math.sin(q) / q

    scale = math.exp(s * t)
    ts = t * sinhc
    return Mat2(scale * (c + ts * b11), scale * ts * a.a12,
                scale * ts * a.a21, scale * (c - ts * b11))


@dataclasses.dataclass(frozen=True)
class GaussianDataSpec:
    mu0_x: Tuple[float, ...]
    var0_x: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, 'mu0_x', tuple(float(v) for v in self.mu0_x))
        object.__setattr__(self, 'var0_x', tuple(float(v) for v in self.var0_x))
        if len(self.mu0_x) == 0 or len(self.mu0_x) != len(self.var0_x):
            raise InvalidParams(
                "mu0_x and var0_x must be non-empty and of equal length", 'var0_x')
        if not all(math.isfinite(v) for v in self.mu0_x):
            raise InvalidParams("mu0_x entries must be finite", 'mu0_x')
        if not all(math.isfinite(v) and v > 0 for v in self.var0_x):
            raise InvalidParams("var0_x entries must be > 0", 'var0_x')

    @classmethod
    def isotropic(cls, dim: int, mean: float = 0.5,
                  var: float = 0.25) -> 'GaussianDataSpec':
        return cls((mean,) * dim, (var,) * dim)

    @property
    def dim(self) -> int:
        return len(self.mu0_x)

    def initial_moments(self, p: PsldParams) -> 'GaussianMoments':
        mu = np.zeros((self.dim, 2))
        mu[:, 0] = self.mu0_x
        sigma = np.zeros((self.dim, 2, 2))
        sigma[:, 0, 0] = self.var0_x
        sigma[:, 1, 1] = p.gamma_init * p.mass
        return GaussianMoments(mu, sigma)

    def to_json(self) -> Dict[str, Any]:
        return {'mu0_x': list(self.mu0_x), 'var0_x': list(self.var0_x)}

    @staticmethod
    def from_json(json_object: Dict[str, Any]) -> 'GaussianDataSpec':
        return GaussianDataSpec(json_object['mu0_x'], json_object['var0_x'])


@dataclasses.dataclass(eq=False)
class GaussianMoments:
    # mu: [d, 2] (x, m) means, sigma: [d, 2, 2] covariance blocks
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        if self.mu.ndim != 2 or self.mu.shape[1] != 2 or \
                self.sigma.shape != self.mu.shape + (2,):
            raise ContractError(
                f"GaussianMoments shapes mismatch: mu {self.mu.shape}, "
                f"sigma {self.sigma.shape}")

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    def check_psd(self, tol: float = 1e-12) -> None:
        scale = np.maximum(np.abs(self.sigma).max(axis=(1, 2)), 1.0)
        asym = np.abs(self.sigma[:, 0, 1] - self.sigma[:, 1, 0])
        if np.any(asym > tol * scale):
            raise NonPSDError("Covariance block is not symmetric")
        det = self.sigma[:, 0, 0] * self.sigma[:, 1, 1] - \
            self.sigma[:, 0, 1] * self.sigma[:, 1, 0]
        trace = self.sigma[:, 0, 0] + self.sigma[:, 1, 1]
        if np.any(det < -tol * scale ** 2) or np.any(trace < -tol * scale):
            raise NonPSDError("Covariance block is not positive semidefinite")

    def to_json(self) -> Dict[str, Any]:
        return {'mu': self.mu.tolist(), 'sigma': self.sigma.tolist()}


@dataclasses.dataclass(eq=False)
class JointState:
    # x, m: [n_chains, d]; t: forward time
    x: np.ndarray
    m: np.ndarray
    t: float

    def __post_init__(self):
        if self.x.ndim != 2 or self.x.shape != self.m.shape:
            raise ContractError(
                f"x and m must be [n_chains, d] arrays of identical shape, "
                f"got {self.x.shape} and {self.m.shape}")

    @property
    def n_chains(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def stacked(self) -> np.ndarray:
        return np.stack([self.x, self.m], axis=-1)

    def copy(self) -> 'JointState':
        return JointState(self.x.copy(), self.m.copy(), self.t)

    def check_finite(self, step_index: int) -> None:
        for name in ('x', 'm'):
            values = getattr(self, name)
            if not np.all(np.isfinite(values)):
                bad = int(np.count_nonzero(~np.isfinite(values)))
                raise NonFiniteState(
                    f"Non-finite {name} after step {step_index} "
                    f"(t={self.t}): {bad} entries",
                    step_index, name)


@dataclasses.dataclass(eq=False)
class ScoreEval:
    sx: np.ndarray
    sm: np.ndarray
    t_cond: float


def _check_dim(p: PsldParams, data: GaussianDataSpec) -> None:
    if data.dim != p.dim:
        raise InvalidParams(
            f"Data dimension {data.dim} does not match params dim {p.dim}", 'dim')


def stationary_moments(p: PsldParams) -> GaussianMoments:
    sigma = np.broadcast_to(stationary_covariance(p), (p.dim, 2, 2)).copy()
    return GaussianMoments(np.zeros((p.dim, 2)), sigma)


def forward_moments(p: PsldParams, data: GaussianDataSpec, t: float) -> GaussianMoments:
    """
    Exact marginal moments of the forward SDE started at the Gaussian data.

    The stationary covariance diag(1, M) solves the Lyapunov equation, so the
    covariance ODE has the closed form
    Sigma_t = Sigma_inf + e^{Ft} (Sigma_0 - Sigma_inf) e^{F^T t}.
    """
    if not 0.0 <= t <= p.t_max:
        raise InvalidParams(f"t={t} outside [0, {p.t_max}]", 't')
    _check_dim(p, data)

    e = mat2_exp(drift_matrix(p), t).as_array()
    init = data.initial_moments(p)
    stat = stationary_covariance(p)
    mu = init.mu @ e.T
    sigma = stat + np.einsum('ij,djk,lk->dil', e, init.sigma - stat, e)
    sigma = 0.5 * (sigma + sigma.transpose(0, 2, 1))
    return GaussianMoments(mu, sigma)


def moment_derivatives(
        p: PsldParams, data: GaussianDataSpec,
        t: float) -> Tuple[np.ndarray, np.ndarray]:
    """d mu/dt and d Sigma/dt in forward time."""
    moments = forward_moments(p, data, t)
    f = drift_matrix(p).as_array()
    g = diffusion_matrix(p).as_array()
    dmu = moments.mu @ f.T
    f_sigma = np.einsum('ij,djk->dik', f, moments.sigma)
    dsigma = f_sigma + f_sigma.transpose(0, 2, 1) + g @ g.T
    return dmu, dsigma


def precision_blocks(moments: GaussianMoments, t: float) -> np.ndarray:
    s = moments.sigma
    det = s[:, 0, 0] * s[:, 1, 1] - s[:, 0, 1] * s[:, 1, 0]
    if np.any(det <= 1e-30):
        raise DegenerateMarginal(
            f"Degenerate marginal at t={t}: det(Sigma_t) = {float(det.min())}", t)
    inv = np.empty_like(s)
    inv[:, 0, 0] = s[:, 1, 1]
    inv[:, 0, 1] = -s[:, 0, 1]
    inv[:, 1, 0] = -s[:, 1, 0]
    inv[:, 1, 1] = s[:, 0, 0]
    return inv / det[:, None, None]


def cholesky_2x2(sigma: np.ndarray) -> np.ndarray:
    a = sigma[:, 0, 0]
    b = sigma[:, 1, 0]
    c = sigma[:, 1, 1]
    if np.any(a <= 0):
        raise NonPSDError("Cholesky failed: non-positive leading entry")
    l11 = np.sqrt(a)
    l21 = b / l11
    rest = c - l21 * l21
    if np.any(rest < 0):
        raise NonPSDError("Cholesky failed: covariance block is not PSD")
    chol = np.zeros_like(sigma)
    chol[:, 0, 0] = l11
    chol[:, 1, 0] = l21
    chol[:, 1, 1] = np.sqrt(rest)
    return chol


def perturbation_sample(p: PsldParams, data: GaussianDataSpec, t: float,
                        n: int, rng: Any) -> JointState:
    """n i.i.d. draws of z_t ~ N(mu_t, Sigma_t + 1e-9 I) per dimension."""
    moments = forward_moments(p, data, t)
    chol = cholesky_2x2(moments.sigma + CHOLESKY_JITTER * np.eye(2))
    eps = rng.standard_normal((n, p.dim, 2))
    z = moments.mu[None] + np.einsum('dij,ndj->ndi', chol, eps)
    return JointState(np.ascontiguousarray(z[..., 0]),
                      np.ascontiguousarray(z[..., 1]), t)


def stationary_sample(p: PsldParams, n: int, rng: Any) -> JointState:
    x = rng.standard_normal((n, p.dim))
    m = math.sqrt(p.mass) * rng.standard_normal((n, p.dim))
    return JointState(x, m, p.t_max)

