import contextlib
import csv
import json
import logging
import os
import time

from typing import Any, Dict, Iterator, List, Sequence, Tuple

import numpy as np

from splitting_sampler import __version__, helpers, work
from splitting_sampler.config import ExperimentConfig, save_config
from splitting_sampler.exceptions import ConfigError
from splitting_sampler.streams import DEFAULT_BLOCK_SIZE, SEED_DERIVATION


logger = logging.getLogger(__name__)


MANIFEST_VERSION = 1
MANIFEST_FILENAME = "manifest.json"
RESULT_COLUMNS = ('scheme', 'N', 'nfe', 'lambda_s', 'metric', 'value', 'seed')
TRUNCATION_COLUMNS = ('scheme', 'h', 'residual_x', 'residual_m', 'cov_residual', 'seed')


def _csv_value(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_rows(path: str, columns: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    with open(path, "w", encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_csv_value(v) for v in row])


def write_json(path: str, obj: Any) -> None:
    with open(path, "w", encoding='utf-8') as f:
        f.write(json.dumps(obj, indent=2))
        f.write("\n")


def prepare_output_dir(path: str) -> None:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"Could not create output_dir '{path}': {e}", 'output_dir')
    if not os.access(path, os.W_OK):
        raise ConfigError(f"output_dir '{path}' is not writable", 'output_dir')


class ExperimentRunner:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self._outputs: List[str] = []

    @property
    def output_dir(self) -> str:
        return self.cfg.output_dir

    def _out_path(self, filename: str) -> str:
        self._outputs.append(filename)
        return os.path.join(self.output_dir, filename)

    def run(self) -> Dict[str, Any]:
        prepare_output_dir(self.output_dir)
        self._outputs = []
        logger.info("Running experiment '%s' with %d scheme(s), %d seed(s) -> %s",
                    self.cfg.experiment, len(self.cfg.schemes), len(self.cfg.seeds),
                    self.output_dir)

        started = time.perf_counter()
        items = work.build_work_items(self.cfg)
        queue = work.setup_work_queue(items, max_workers=self.cfg.workers)
        success, errors = queue.start_and_join_all()
        work.report_results(success, errors)

        self._write_outputs(success, errors)
        manifest = self._manifest(
            success, errors, time.perf_counter() - started, queue.wall_times())
        write_json(os.path.join(self.output_dir, MANIFEST_FILENAME), manifest)
        logger.info("Wrote %d output file(s) and %s", len(self._outputs), MANIFEST_FILENAME)
        return manifest

    def _write_outputs(self, success: List[work.WorkType],
                       errors: List[Tuple[work.WorkType, str]]) -> None:
        save_config(self.cfg, self._out_path("config.json"))

        if self.cfg.experiment == 'truncation':
            rows: List[Sequence[Any]] = [r for w in success for r in w.rows]
            write_rows(self._out_path("truncation.csv"), TRUNCATION_COLUMNS, rows)
        else:
            rows = [r for w in success for r in w.rows]
            write_rows(self._out_path("results.csv"), RESULT_COLUMNS, rows)

        for w in success:
            if isinstance(w, work.WorkSample) and w.samples is not None:
                np.save(self._out_path(f"{w.name}.npy"), w.samples)
            elif isinstance(w, work.WorkTruncation) and w.report is not None:
                write_json(self._out_path(f"{w.name}.json"), w.report.to_json())

        write_json(self._out_path("summary.json"), {
            'experiment': self.cfg.experiment,
            'items': [w.summary() for w in success],
            'errors': [{'work': str(w), 'error': err} for w, err in errors],
        })

    def _manifest(self, success: List[work.WorkType],
                  errors: List[Tuple[work.WorkType, str]],
                  wall_time: float,
                  item_wall_times: List[Tuple[work.WorkType, float]]) -> Dict[str, Any]:
        return {
            'version': MANIFEST_VERSION,
            'type': 'Manifest',
            'library_version': __version__,
            'experiment': self.cfg.experiment,
            'config_sha256': self.cfg.config_hash(),
            'seeds': list(self.cfg.seeds),
            'seed_derivation': f"{SEED_DERIVATION}; block_size={DEFAULT_BLOCK_SIZE}",
            'wall_time_s': wall_time,
            'item_wall_times': [
                {'work': str(w), 'wall_time_s': seconds} for w, seconds in item_wall_times],
            'total_nfe': sum(w.total_nfe for w in success),
            'outputs': [
                {'path': name,
                 'sha256': helpers.sha256_file(os.path.join(self.output_dir, name))}
                for name in self._outputs
            ],
            'errors': [{'work': str(w), 'error': err} for w, err in errors],
            'status': 'failed' if errors else 'ok',
        }


@contextlib.contextmanager
def crash_manifest(runner: ExperimentRunner) -> Iterator[ExperimentRunner]:
    """Contextmanager that records a crash manifest on Exception"""
    try:
        yield runner
    except Exception as e:
        if os.path.isdir(runner.output_dir):
            fn, ext = os.path.splitext(MANIFEST_FILENAME)
            path = helpers.unique_filename(
                os.path.join(runner.output_dir, f"{fn}_crash{ext}"))
            write_json(path, {
                'version': MANIFEST_VERSION,
                'type': 'Manifest',
                'library_version': __version__,
                'experiment': runner.cfg.experiment,
                'config_sha256': runner.cfg.config_hash(),
                'status': 'crashed',
                'errors': [{'work': None, 'error': f"{type(e).__name__}: {e}"}],
            })
        raise


def run_experiment(cfg: ExperimentConfig) -> Dict[str, Any]:
    with crash_manifest(ExperimentRunner(cfg)) as runner:
        return runner.run()


def verify_manifest(output_dir: str) -> List[str]:
    """:returns: Problems found, empty when every listed output exists and hash-matches"""
    with open(os.path.join(output_dir, MANIFEST_FILENAME), "r", encoding='utf-8') as f:
        manifest = json.load(f)

    problems = []
    for entry in manifest['outputs']:
        path = os.path.join(output_dir, entry['path'])
        if not os.path.isfile(path):
            problems.append(f"Missing output '{entry['path']}'")
        elif helpers.sha256_file(path) != entry['sha256']:
            problems.append(f"Hash mismatch for '{entry['path']}'")

    return problems
