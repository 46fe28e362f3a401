# job_manager.py
import asyncio
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Optional, Sequence

from typing_extensions import Self
# ----------------------------------------------
from core.settings import get_settings

logger = logging.getLogger(__name__)

Job = Callable[[], Any]


class JobManager:
    """Runs independent solve jobs on a thread pool fed by an asyncio queue.

    Results come back in submission order, so the outcome does not depend on
    which worker finishes first. If jobs fail, the exception of the failing job
    with the lowest index is re-raised once every job has finished.
    """

    def __init__(self, max_workers: Optional[int] = None):
        self.max_workers = max_workers or get_settings().workers
        self.executor = ThreadPoolExecutor(max_workers=self.max_workers)

    async def run_jobs(self, jobs: Sequence[Job]) -> list[Any]:
        if not jobs:
            return []
        loop = asyncio.get_running_loop()
        solve_queue: asyncio.Queue = asyncio.Queue()
        results: list[Any] = [None] * len(jobs)
        errors: dict[int, BaseException] = {}

        # Solve worker
        async def solve_worker():
            while True:
                index, job = await solve_queue.get()
                try:
                    results[index] = await loop.run_in_executor(self.executor, job)
                except Exception as e:
                    logger.debug(f"Job {index} failed: {e}")
                    errors[index] = e
                finally:
                    solve_queue.task_done()

        workers = [asyncio.create_task(solve_worker()) for _ in range(min(self.max_workers, len(jobs)))]
        for index, job in enumerate(jobs):
            await solve_queue.put((index, job))
        await solve_queue.join()  # Wait until every job is processed

        for worker in workers:
            worker.cancel()
        await asyncio.gather(*workers, return_exceptions=True)

        if errors:
            raise errors[min(errors)]
        return results

    def map(self, jobs: Sequence[Job]) -> list[Any]:
        """Blocking variant of run_jobs for synchronous callers."""
        if len(jobs) <= 1 or self.max_workers == 1:
            return [job() for job in jobs]
        return asyncio.run(self.run_jobs(jobs))

    def shutdown(self) -> None:
        self.executor.shutdown(wait=True)

    def __enter__(self) -> Self:
        return self

    def __exit__(self, *exc) -> None:
        self.shutdown()


_default_manager: Optional[JobManager] = None
_default_lock = threading.Lock()

def get_job_manager() -> JobManager:
    """Shared manager sized by RTE_WORKERS; safe to call from several threads."""
    global _default_manager
    if _default_manager is None:
        with _default_lock:
            if _default_manager is None:
                _default_manager = JobManager()
    return _default_manager
