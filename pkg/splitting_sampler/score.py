"""
Score providers: the exact Gaussian oracle, a zero score and an external
process speaking newline-delimited JSON over stdin/stdout.
"""
import contextlib
import dataclasses
import json
import logging
import queue
import shlex
import subprocess
import threading

from typing import Iterator, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from splitting_sampler.exceptions import ContractError, ProviderError
from splitting_sampler.psld import (
    GaussianDataSpec, JointState, PsldParams, ScoreEval,
    forward_moments, moment_derivatives, precision_blocks
)


logger = logging.getLogger(__name__)


DEFAULT_PROVIDER_TIMEOUT = 30.0


def analytic_score(p: PsldParams, data: GaussianDataSpec, state: JointState,
                   t_cond: float) -> ScoreEval:
    moments = forward_moments(p, data, t_cond)
    prec = precision_blocks(moments, t_cond)
    dx = state.x - moments.mu[:, 0]
    dm = state.m - moments.mu[:, 1]
    sx = -(prec[:, 0, 0] * dx + prec[:, 0, 1] * dm)
    sm = -(prec[:, 1, 0] * dx + prec[:, 1, 1] * dm)
    return ScoreEval(sx, sm, t_cond)


class ScoreProvider(Protocol):
    # True iff the score is an affine function of the state, which lets the
    # law of a sampler be propagated exactly
    affine: bool

    def score(self, state: JointState, t_cond: float) -> ScoreEval:
        ...


class GaussianScoreProvider:
    affine = True

    def __init__(self, p: PsldParams, data: GaussianDataSpec):
        self.p = p
        self.data = data

    def score(self, state: JointState, t_cond: float) -> ScoreEval:
        return analytic_score(self.p, self.data, state, t_cond)

    def jacobian(self, t_cond: float) -> np.ndarray:
        """
        Spatial Jacobian of the score per dimension, [d, 2, 2], rows (s^x, s^m)
        and columns (x, m). Equals -Sigma_t^{-1}.
        """
        moments = forward_moments(self.p, self.data, t_cond)
        return -precision_blocks(moments, t_cond)

    def time_derivative(self, state: JointState,
                        t_cond: float) -> Tuple[np.ndarray, np.ndarray]:
        """
        d/dt of (s^x, s^m) at a fixed state, in forward time.

        s = -P (z - mu) with P = Sigma^{-1}, dP/dt = -P dSigma/dt P, so
        ds/dt = P dSigma/dt P (z - mu) + P dmu/dt.
        """
        moments = forward_moments(self.p, self.data, t_cond)
        prec = precision_blocks(moments, t_cond)
        dmu, dsigma = moment_derivatives(self.p, self.data, t_cond)
        dz = state.stacked() - moments.mu[None]
        k = prec @ dsigma @ prec
        ds = np.einsum('dij,ndj->ndi', k, dz) + np.einsum('dij,dj->di', prec, dmu)[None]
        return ds[..., 0], ds[..., 1]


class ZeroScoreProvider:
    affine = True

    def score(self, state: JointState, t_cond: float) -> ScoreEval:
        return ScoreEval(np.zeros_like(state.x), np.zeros_like(state.m), t_cond)

    def jacobian(self, t_cond: float, dim: int = 1) -> np.ndarray:
        return np.zeros((dim, 2, 2))

    def time_derivative(self, state: JointState,
                        t_cond: float) -> Tuple[np.ndarray, np.ndarray]:
        return np.zeros_like(state.x), np.zeros_like(state.m)


class ExternalScoreProvider:
    """
    Child process answering one JSON line {"sx": [[...]], "sm": [[...]]} per
    request line {"t": t, "x": [[...]], "m": [[...]]}, in order.
    """

    affine = False

    def __init__(self, command: Union[str, Sequence[str]],
                 timeout: float = DEFAULT_PROVIDER_TIMEOUT):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = timeout
        self._proc: Optional[subprocess.Popen] = None
        self._lines: queue.Queue[Optional[str]] = queue.Queue()
        self._reader: Optional[threading.Thread] = None

    def start(self) -> 'ExternalScoreProvider':
        try:
            self._proc = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                text=True, bufsize=1)
        except OSError as e:
            raise ProviderError(
                f"Could not start score provider {self.command}: {e}")

        self._reader = threading.Thread(target=self._read_lines, daemon=True)
        self._reader.start()
        logger.debug("Started score provider %s (pid %d)",
                     self.command, self._proc.pid)
        return self

    def _read_lines(self) -> None:
        assert self._proc is not None and self._proc.stdout is not None
        for line in self._proc.stdout:
            self._lines.put(line)
        # EOF
        self._lines.put(None)

    def score(self, state: JointState, t_cond: float) -> ScoreEval:
        if self._proc is None:
            self.start()
        assert self._proc is not None and self._proc.stdin is not None

        request = json.dumps(
            {'t': t_cond, 'x': state.x.tolist(), 'm': state.m.tolist()})
        try:
            self._proc.stdin.write(request + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as e:
            logger.exception("Score provider %s died", self.command)
            raise ProviderError(f"Score provider exited: {e}")
        logger.debug("Sent %d bytes to score provider at t=%s", len(request), t_cond)

        try:
            line = self._lines.get(timeout=self.timeout)
        except queue.Empty:
            raise ProviderError(
                f"Score provider timed out after {self.timeout}s at t={t_cond}")
        if line is None:
            raise ProviderError(
                f"Score provider exited with code {self._proc.poll()}")

        try:
            response = json.loads(line)
            sx = np.asarray(response['sx'], dtype=float)
            sm = np.asarray(response['sm'], dtype=float)
        except (ValueError, KeyError, TypeError) as e:
            raise ProviderError(f"Malformed score provider response: {e}")

        return ScoreEval(sx, sm, t_cond)

    def close(self) -> None:
        if self._proc is None:
            return
        try:
            if self._proc.stdin is not None:
                self._proc.stdin.close()
            self._proc.wait(timeout=self.timeout)
        except (OSError, subprocess.TimeoutExpired):
            self._proc.kill()
            self._proc.wait()
        self._proc = None

    def __enter__(self) -> 'ExternalScoreProvider':
        return self.start()

    def __exit__(self, exc_type, exc_value, traceback):
        self.close()


@dataclasses.dataclass
class RunContext:
    """Per-run NFE counter and optional trace buffer."""
    nfe: int = 0
    t_conds: List[float] = dataclasses.field(default_factory=list)
    trace: Optional[List[Tuple[float, JointState]]] = None

    def record(self, state: JointState) -> None:
        if self.trace is not None:
            self.trace.append((state.t, state.copy()))


def score_provider_call(provider: ScoreProvider, state: JointState, t_cond: float,
                        run: RunContext) -> ScoreEval:
    se = provider.score(state, t_cond)
    if se.sx.shape != state.x.shape or se.sm.shape != state.m.shape:
        raise ContractError(
            f"Score shapes {se.sx.shape}/{se.sm.shape} do not match state "
            f"shape {state.x.shape}")
    if not (np.all(np.isfinite(se.sx)) and np.all(np.isfinite(se.sm))):
        raise ContractError(f"Provider returned non-finite scores at t_cond={t_cond}")
    if se.t_cond != t_cond:
        se = ScoreEval(se.sx, se.sm, t_cond)

    run.nfe += 1
    run.t_conds.append(t_cond)
    return se


EXTERNAL_PREFIX = 'external:'


@contextlib.contextmanager
def open_provider(name: str, p: PsldParams,
                  data: GaussianDataSpec) -> Iterator[ScoreProvider]:
    """Provider named 'gaussian', 'zero' or 'external:<cmd>', closed on exit."""
    if name == 'gaussian':
        yield GaussianScoreProvider(p, data)
    elif name == 'zero':
        yield ZeroScoreProvider()
    elif name.startswith(EXTERNAL_PREFIX):
        with ExternalScoreProvider(name[len(EXTERNAL_PREFIX):]) as provider:
            yield provider
    else:
        raise ProviderError(f"Unknown score provider '{name}'")
