import dataclasses
import logging

from typing import Any, Dict, List, NamedTuple, Optional, Tuple, Union

import numpy as np

from splitting_sampler.analysis import (
    METRICS, TruncationReport, default_lambda_grid, distribution_error,
    empirical_moments, lambda_sweep, target_moments, truncation_residual,
    weak_error_curve
)
from splitting_sampler.config import ExperimentConfig
from splitting_sampler.integrators import SchemeSpec, build_time_grid, sample, total_nfe
from splitting_sampler.score import open_provider
from splitting_sampler.work_queue import WorkQueue


logger = logging.getLogger(__name__)


class ResultRow(NamedTuple):
    scheme: str
    n_steps: int
    nfe: int
    lambda_s: Optional[float]
    metric: str
    value: float
    seed: int


class TruncationRow(NamedTuple):
    scheme: str
    h: float
    residual_x: float
    residual_m: float
    cov_residual: float
    seed: int


@dataclasses.dataclass
class WorkSample:
    cfg: ExperimentConfig
    spec: SchemeSpec
    n_steps: int
    seed: int
    rows: List[ResultRow] = dataclasses.field(default_factory=list)
    samples: Optional[np.ndarray] = None
    total_nfe: int = 0

    def do_work(self):
        cfg = self.cfg
        spec = self.spec.with_default_lambda(self.n_steps)
        grid = build_time_grid(
            cfg.params.t_max, cfg.params.eps_cutoff, self.n_steps, cfg.striding)
        with open_provider(cfg.provider, cfg.params, cfg.data) as provider:
            result = sample(cfg.params, provider, spec, grid, cfg.n_chains, self.seed)

        self.total_nfe = result.total_nfe
        self.samples = result.state.stacked()
        estimate = empirical_moments(result.state)
        target = target_moments(cfg.params, cfg.data, spec)
        self.rows = [
            ResultRow(spec.scheme, self.n_steps, result.total_nfe, spec.lambda_s,
                      metric, distribution_error(metric, estimate, target), self.seed)
            for metric in METRICS
        ]
        return self

    @property
    def name(self) -> str:
        return f"sample_{self.spec.scheme}_N{self.n_steps}_seed{self.seed}"

    def summary(self) -> Dict[str, Any]:
        return {'work': self.name, 'total_nfe': self.total_nfe,
                'rows': [r._asdict() for r in self.rows]}

    def report_success(self) -> str:
        w2 = next((r.value for r in self.rows if r.metric == 'w2'), float('nan'))
        return (f"Sampled {self.spec.scheme} with N={self.n_steps}, seed={self.seed}:\n"
                f"  NFE: {self.total_nfe}\n"
                f"  W2 to target: {w2:.6g}")

    def report_error(self) -> str:
        return f"Error sampling {self.spec.scheme} with N={self.n_steps}, seed={self.seed}!"

    def __str__(self) -> str:
        return f"Sampling {self.spec.scheme} N={self.n_steps} seed={self.seed}"


@dataclasses.dataclass
class WorkCurve:
    cfg: ExperimentConfig
    spec: SchemeSpec
    seed: int
    rows: List[ResultRow] = dataclasses.field(default_factory=list)
    total_nfe: int = 0

    def do_work(self):
        cfg = self.cfg
        with open_provider(cfg.provider, cfg.params, cfg.data) as provider:
            curve = weak_error_curve(
                cfg.params, cfg.data, self.spec, cfg.steps, cfg.n_chains, self.seed,
                striding=cfg.striding, metric=cfg.metric, exact=cfg.exact_moments,
                provider=provider, budget_lambda=True)

        self.rows = [
            ResultRow(self.spec.scheme, n_steps, int(nfe),
                      self.spec.with_default_lambda(n_steps).lambda_s,
                      cfg.metric, error, self.seed)
            for n_steps, (nfe, error) in zip(cfg.steps, curve.points)
        ]
        self.total_nfe = sum(r.nfe for r in self.rows)
        return self

    @property
    def name(self) -> str:
        return f"curve_{self.spec.scheme}_seed{self.seed}"

    def summary(self) -> Dict[str, Any]:
        return {'work': self.name, 'total_nfe': self.total_nfe,
                'rows': [r._asdict() for r in self.rows]}

    def report_success(self) -> str:
        points = ", ".join(f"{r.nfe}: {r.value:.4g}" for r in self.rows)
        return f"Error curve {self.spec.scheme} seed={self.seed} ({self.cfg.metric}):\n  {points}"

    def report_error(self) -> str:
        return f"Error computing the error curve of {self.spec.scheme}, seed={self.seed}!"

    def __str__(self) -> str:
        return f"Error curve {self.spec.scheme} over N={list(self.cfg.steps)} seed={self.seed}"


@dataclasses.dataclass
class WorkSweep:
    cfg: ExperimentConfig
    spec: SchemeSpec
    n_steps: int
    seed: int
    rows: List[ResultRow] = dataclasses.field(default_factory=list)
    best_lambda: Optional[float] = None
    total_nfe: int = 0

    def do_work(self):
        cfg = self.cfg
        lambdas = cfg.lambda_grid or default_lambda_grid(self.spec.scheme, self.n_steps)
        with open_provider(cfg.provider, cfg.params, cfg.data) as provider:
            self.best_lambda, curve = lambda_sweep(
                cfg.params, cfg.data, self.spec, self.n_steps, lambdas, cfg.n_chains,
                self.seed, striding=cfg.striding, metric=cfg.metric,
                exact=cfg.exact_moments, provider=provider)

        nfe = total_nfe(self.spec, self.n_steps)
        self.rows = [
            ResultRow(self.spec.scheme, self.n_steps, nfe, lam, cfg.metric, error, self.seed)
            for lam, error in curve.points
        ]
        self.total_nfe = nfe * len(self.rows)
        return self

    @property
    def name(self) -> str:
        return f"sweep_{self.spec.scheme}_N{self.n_steps}_seed{self.seed}"

    def summary(self) -> Dict[str, Any]:
        return {'work': self.name, 'best_lambda_s': self.best_lambda,
                'total_nfe': self.total_nfe, 'rows': [r._asdict() for r in self.rows]}

    def report_success(self) -> str:
        return (f"Swept lambda_s for {self.spec.scheme} N={self.n_steps} seed={self.seed}:\n"
                f"  Best lambda_s: {self.best_lambda}")

    def report_error(self) -> str:
        return f"Error sweeping lambda_s for {self.spec.scheme} N={self.n_steps}!"

    def __str__(self) -> str:
        return f"Sweeping lambda_s {self.spec.scheme} N={self.n_steps} seed={self.seed}"


@dataclasses.dataclass
class WorkTruncation:
    cfg: ExperimentConfig
    spec: SchemeSpec
    seed: int
    report: Optional[TruncationReport] = None
    total_nfe: int = 0

    def do_work(self):
        cfg = self.cfg
        with open_provider(cfg.provider, cfg.params, cfg.data) as provider:
            self.report = truncation_residual(
                cfg.params, cfg.data, self.spec, cfg.t0, cfg.h_values, cfg.n_chains,
                self.seed, provider=provider)
        # mean and noisy probe per step size
        self.total_nfe = 2 * self.spec.nfe_per_step * len(cfg.h_values)
        return self

    @property
    def rows(self) -> List[TruncationRow]:
        if self.report is None:
            return []
        return [
            TruncationRow(self.spec.scheme, h, rx, rm, rc, self.seed)
            for h, rx, rm, rc in zip(self.report.h_values, self.report.residual_x,
                                     self.report.residual_m, self.report.cov_residual)
        ]

    @property
    def name(self) -> str:
        return f"truncation_{self.spec.scheme}_seed{self.seed}"

    def summary(self) -> Dict[str, Any]:
        return {'work': self.name, 'total_nfe': self.total_nfe,
                'report': None if self.report is None else self.report.to_json()}

    def report_success(self) -> str:
        assert self.report is not None
        return (f"Truncation probe {self.spec.scheme} seed={self.seed}:\n"
                f"  Slope x: {self.report.fitted_slope_x:.3f}\n"
                f"  Slope m: {self.report.fitted_slope_m:.3f}")

    def report_error(self) -> str:
        return f"Error probing the truncation error of {self.spec.scheme}!"

    def __str__(self) -> str:
        return f"Truncation probe {self.spec.scheme} t0={self.cfg.t0} seed={self.seed}"


WorkType = Union[WorkSample, WorkCurve, WorkSweep, WorkTruncation]
WorkResult = WorkType
ExperimentQueue = WorkQueue[WorkType, WorkResult]


def build_work_items(cfg: ExperimentConfig) -> List[WorkType]:
    items: List[WorkType] = []
    for spec in cfg.schemes:
        for seed in cfg.seeds:
            if cfg.experiment == 'sample':
                items.extend(WorkSample(cfg, spec, n, seed) for n in cfg.steps)
            elif cfg.experiment == 'error_curve':
                items.append(WorkCurve(cfg, spec, seed))
            elif cfg.experiment == 'lambda_sweep':
                items.extend(WorkSweep(cfg, spec, n, seed) for n in cfg.steps)
            else:
                items.append(WorkTruncation(cfg, spec, seed))

    return items


def do_work(work: WorkType) -> WorkResult:
    return work.do_work()


def setup_work_queue(work_items: List[WorkType], max_workers: int = 1) -> ExperimentQueue:
    return ExperimentQueue(do_work, max_workers=max_workers,
                           report_progress_timestep_seconds=60,
                           work=work_items)


def report_results(success: List[WorkType], errors: List[Tuple[WorkType, str]]):
    if success:
        logger.info(
            "Successfully completed the following %d operation(s):\n%s",
            len(success),
            "\n".join(w.report_success() for w in success))
    if errors:
        logger.warning(
            "Failed to complete the following %d operation(s):\n%s",
            len(errors), "\n".join(f"{w.report_error()}:\n Error: {err}"
                                   for w, err in errors))

    if not success and not errors:
        logger.info("No operations were run, the config names no schemes or seeds!")
