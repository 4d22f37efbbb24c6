#!/usr/bin/env python3
"""
Background Task Manager for training runs.
Executes runs in worker threads and records how each one ended.
"""

import logging
import threading
from concurrent.futures import Future, ThreadPoolExecutor
from datetime import datetime
from typing import Any, Callable, Dict, Iterable, Optional

from errors import RunCancelledError

logger = logging.getLogger(__name__)


class BackgroundTaskManager:
    """
    Runs training jobs on a thread pool.

    Features:
    - one Future per run ID
    - status tracking (running, completed, failed, cancelled)
    - queued runs can be cancelled outright; running ones stop cooperatively
      when their function raises RunCancelledError

    Example:
        task_manager = BackgroundTaskManager(max_workers=1)
        task_manager.submit_task(run_id, trainer.train, spec, config, train_data, test_data)
        task_manager.get_task_status(run_id)
    """

    def __init__(self, max_workers: int = 1):
        """
        Args:
            max_workers: Maximum number of concurrent runs
        """
        self.max_workers = max_workers
        self._executor = ThreadPoolExecutor(max_workers=max_workers, thread_name_prefix="train-run")
        self._tasks: Dict[str, Future] = {}
        self._task_info: Dict[str, Dict[str, Any]] = {}
        self._lock = threading.Lock()
        logger.info(f"TaskManager initialized with {max_workers} workers")

    def submit_task(self, run_id: str, fn: Callable, *args, on_done: Optional[Callable[[str, Future], None]] = None,
                    **kwargs) -> Future:
        """
        Submit ``fn(*args, **kwargs)`` for background execution.

        Args:
            run_id: Run ID to associate with this task
            fn: Function to execute
            on_done: Called with (run_id, future) after the status is recorded

        Returns:
            Future: Future object representing the task
        """
        with self._lock:
            if run_id in self._tasks and not self._tasks[run_id].done():
                raise ValueError(f"run {run_id} already has an active task")
            future = self._executor.submit(self._execute_with_error_handling, run_id, fn, *args, **kwargs)
            self._tasks[run_id] = future
            self._task_info[run_id] = {"started_at": datetime.now(), "status": "running", "error": None}
        future.add_done_callback(lambda f: self._task_done_callback(run_id, f, on_done))
        logger.info(f"Submitted task for run {run_id}")
        return future

    def _execute_with_error_handling(self, run_id: str, fn: Callable, *args, **kwargs) -> Any:
        try:
            logger.info(f"Starting task execution for run {run_id}")
            return fn(*args, **kwargs)
        except RunCancelledError:
            logger.info(f"Task for run {run_id} stopped on cancellation")
            raise
        except Exception as e:
            logger.error(f"Task failed for run {run_id}: {e}", exc_info=True)
            raise

    def _task_done_callback(self, run_id: str, future: Future,
                            on_done: Optional[Callable[[str, Future], None]]) -> None:
        with self._lock:
            info = self._task_info.get(run_id)
            if info is not None:
                error = None if future.cancelled() else future.exception()
                if future.cancelled() or isinstance(error, RunCancelledError):
                    info["status"] = "cancelled"
                elif error is not None:
                    info["status"] = "failed"
                    info["error"] = str(error)
                else:
                    info["status"] = "completed"
                info["completed_at"] = datetime.now()
                logger.info(f"Task for run {run_id} finished: {info['status']}")
        if on_done is not None:
            on_done(run_id, future)

    def cancel_task(self, run_id: str) -> bool:
        """
        Cancel a queued task.

        Returns:
            bool: True if the task had not started and is now cancelled
        """
        with self._lock:
            future = self._tasks.get(run_id)
        if future is None:
            logger.warning(f"Attempted to cancel non-existent task: {run_id}")
            return False
        # Done-callbacks of a cancelled future run synchronously and take the lock.
        cancelled = future.cancel()
        if cancelled:
            logger.info(f"Successfully cancelled queued task for run {run_id}")
        return cancelled

    def get_task_status(self, run_id: str) -> Optional[Dict[str, Any]]:
        with self._lock:
            if run_id not in self._task_info:
                return None
            info = self._task_info[run_id].copy()
            future = self._tasks.get(run_id)
            if future is not None:
                info["is_running"] = future.running()
                info["is_done"] = future.done()
            return info

    def forget_tasks(self, run_ids: Iterable[str]) -> int:
        """Drop bookkeeping for finished tasks. Unfinished ones are kept."""
        removed = 0
        with self._lock:
            for run_id in run_ids:
                future = self._tasks.get(run_id)
                if future is not None and not future.done():
                    continue
                self._tasks.pop(run_id, None)
                if self._task_info.pop(run_id, None) is not None:
                    removed += 1
        if removed:
            logger.info(f"Forgot {removed} finished tasks")
        return removed

    def get_active_task_count(self) -> int:
        with self._lock:
            return sum(1 for future in self._tasks.values() if future.running())

    def shutdown(self, wait: bool = True) -> None:
        logger.info(f"Shutting down TaskManager (wait={wait})")
        self._executor.shutdown(wait=wait)
