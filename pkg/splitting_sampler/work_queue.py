import threading
import queue
import dataclasses
import logging
import time

from typing import (
    TypeVar, Generic, Optional, Callable, Tuple, Iterable, List
)


logger = logging.getLogger(__name__)


WorkType = TypeVar('WorkType')
ResultType = TypeVar('ResultType')

CANCELLED = "Cancelled by Ctrl+C before it was started"


@dataclasses.dataclass
class WrappedWork(Generic[WorkType]):
    work: WorkType
    index: int
    # perf_counter value, None while pending
    started_at: Optional[float] = None

    @property
    def started(self) -> bool:
        return self.started_at is not None


@dataclasses.dataclass
class WrappedResult(Generic[WorkType, ResultType]):
    work: WrappedWork[WorkType]
    result: Optional[ResultType]
    error: Optional[str]
    wall_time: float = 0.0


class WorkQueue(Generic[WorkType, ResultType]):
    """
    Runs each work item on its own thread, at most `max_workers` at a time.
    Results are returned in the order the items were added, so the output of
    an experiment does not depend on which item finished first.
    Not thread-safe!
    """

    def __init__(
            self,
            worker_func: Callable[[WorkType], ResultType],
            max_workers: int = 1,
            report_progress_timestep_seconds: float = 0,
            work: Optional[List[WorkType]] = None):
        """
        :params worker_func: Called with a work item on a worker thread
        :params max_workers: Maximum number of threads running at once
        :params report_progress_timestep_seconds:
            Interval in seconds between progress reports while waiting.
            Values <= 0 disable the reports
        :params work: Optional list of work items to initialize the queue with
        """
        if max_workers < 1:
            raise ValueError(f"max_workers must be >= 1, got {max_workers}")
        self._run_item = self._wrap_worker(worker_func)
        self._max_workers = max_workers
        self._work: List[WrappedWork[WorkType]] = []
        self._running: int = 0
        # filled by the worker threads, drained on the calling thread
        self._done: queue.Queue[WrappedResult[WorkType, ResultType]] = queue.Queue()
        self._finished: List[WrappedResult[WorkType, ResultType]] = []
        self._report_every = report_progress_timestep_seconds
        self._last_report: float = 0

        if work:
            self.add_work(work)

    def _wrap_worker(
        self,
        worker_func: Callable[[WorkType], ResultType]
    ) -> Callable[[WrappedWork[WorkType]], None]:
        def wrapped(work: WrappedWork[WorkType]) -> None:
            logger.debug('Starting work: %s', work.work)
            started = time.perf_counter()
            try:
                result = worker_func(work.work)
            except Exception as e:
                error = f"{type(e).__name__}: {e}"
                logger.warning('Failed work: %s: %s', work.work, error)
                self._done.put(WrappedResult(
                    work, None, error, time.perf_counter() - started))
            else:
                wall_time = time.perf_counter() - started
                logger.debug('Completed work in %.2fs: %s', wall_time, work.work)
                self._done.put(WrappedResult(work, result, None, wall_time))

        return wrapped

    def add_work(self, work: Iterable[WorkType]):
        for w in work:
            self._work.append(WrappedWork(w, len(self._work)))

    def _collect(self, result: WrappedResult[WorkType, ResultType]):
        self._finished.append(result)
        self._running -= 1
        self._done.task_done()

    def _collect_all_done(self) -> None:
        while True:
            try:
                result = self._done.get_nowait()
            except queue.Empty:
                return
            self._collect(result)

    def _report_progress(self) -> None:
        if self._report_every <= 0:
            return

        now = time.time()
        if now - self._last_report < self._report_every:
            return
        self._last_report = now

        logger.info("%d/%d work item(s) done", len(self._finished), len(self._work))
        finished = {r.work.index for r in self._finished}
        for work in self._work:
            if work.started and work.index not in finished:
                logger.info("Active job: %s", work.work)

    def _wait_for_one(self):
        """Blocks until a worker reports back, then collects its result."""
        # a blocking Queue.get can't be interrupted by SIGINT, short timeouts
        # and a sleep keep Ctrl+C working
        while True:
            self._report_progress()
            try:
                result = self._done.get(timeout=0.1)
            except queue.Empty:
                time.sleep(0.05)
            else:
                break
        self._collect(result)

    def start_ready(self):
        """Starts threads on pending work items while below `max_workers`"""
        self._collect_all_done()

        for work in self._work:
            if self._running >= self._max_workers:
                break
            if work.started:
                continue

            work.started_at = time.perf_counter()
            threading.Thread(target=self._run_item, args=[work]).start()
            self._running += 1

    def _cancel_pending(self) -> None:
        for work in self._work:
            if not work.started:
                self._finished.append(WrappedResult(work, None, CANCELLED))

    def get_finished_items(self) -> Tuple[List[ResultType], List[Tuple[WorkType, str]]]:
        """:returns: Results of successful items, (item, error) of failed ones"""
        self._collect_all_done()

        success: List[ResultType] = []
        errors: List[Tuple[WorkType, str]] = []
        for result in sorted(self._finished, key=lambda r: r.work.index):
            if result.error is not None:
                errors.append((result.work.work, result.error))
            elif result.result is None:
                raise RuntimeError(
                    f"Work {result.work} finished without error, but has no result")
            else:
                success.append(result.result)

        return success, errors

    def wall_times(self) -> List[Tuple[WorkType, float]]:
        """Seconds spent on each item that ran, in insertion order."""
        return [(r.work.work, r.wall_time)
                for r in sorted(self._finished, key=lambda r: r.work.index)
                if r.work.started]

    def workers_running(self) -> bool:
        return self._running > 0

    def join(self) -> None:
        """Wait till all workers are done! Can be interrupted by KeyboardInterrupt"""
        while self.workers_running():
            self._wait_for_one()

    def start_and_join_all(self) -> Tuple[List[ResultType], List[Tuple[WorkType, str]]]:
        """
        Runs every work item and waits for them.
        On Ctrl+C the running items are finished and the pending ones are
        reported as failed with `CANCELLED`.

        :returns: Results of successful items, (item, error) of failed ones
        """
        try:
            self.start_ready()
            while len(self._finished) < len(self._work):
                self._wait_for_one()
                self.start_ready()
        except KeyboardInterrupt:
            logger.warning(
                "Continue after Ctrl+C... Waiting for %d running item(s) to "
                "finish, pending items are cancelled. Don't force close it!",
                self._running)
            while self._running > 0:
                self._wait_for_one()
            self._cancel_pending()

        return self.get_finished_items()
