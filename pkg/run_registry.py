#!/usr/bin/env python3
"""
Run Registry for background training runs.
Tracks run state with thread-safe operations.
"""

import logging
import threading
import uuid
from datetime import datetime, timedelta
from typing import Any, Dict, List, Optional

logger = logging.getLogger(__name__)

RUN_STATUSES = ("queued", "running", "completed", "failed", "cancelled")
FINISHED_STATUSES = ("completed", "failed", "cancelled")


class RunRegistry:
    """
    Thread-safe store of training run records.

    Each record holds:
    - status (queued, running, completed, failed, cancelled)
    - epochs completed out of the configured total, and the progress percentage
    - the last metrics row and the result paths once finished
    - the error message if the run failed
    - a cancellation event checked by the trainer between steps
    """

    def __init__(self):
        self._runs: Dict[str, Dict[str, Any]] = {}
        self._cancel_events: Dict[str, threading.Event] = {}
        self._lock = threading.Lock()
        logger.info("RunRegistry initialized")

    def create_run(self, spec_name: str, out_dir: str, epochs: int, params: Dict[str, Any]) -> str:
        """
        Register a new run in the ``queued`` state.

        Args:
            spec_name: Display name of the model being trained
            out_dir: Output directory of the run
            epochs: Configured number of epochs
            params: Resolved model and training settings

        Returns:
            str: Unique run ID (UUID)
        """
        run_id = str(uuid.uuid4())
        now = datetime.now()
        record = {
            "run_id": run_id,
            "status": "queued",
            "spec_name": spec_name,
            "out_dir": out_dir,
            "epoch": 0,
            "epochs": epochs,
            "progress": 0,
            "last_metrics": None,
            "result": None,
            "error": None,
            "params": params,
            "created_at": now,
            "updated_at": now,
        }
        with self._lock:
            self._runs[run_id] = record
            self._cancel_events[run_id] = threading.Event()
        logger.info(f"Created run {run_id} for {spec_name} ({epochs} epochs)")
        return run_id

    def get_run(self, run_id: str) -> Optional[Dict[str, Any]]:
        with self._lock:
            record = self._runs.get(run_id)
            return record.copy() if record else None

    def update_run(self, run_id: str, **updates) -> bool:
        """
        Update fields of a run record.

        Returns:
            bool: False if the run does not exist
        """
        with self._lock:
            if run_id not in self._runs:
                logger.warning(f"Attempted to update non-existent run: {run_id}")
                return False
            self._runs[run_id].update(updates)
            self._runs[run_id]["updated_at"] = datetime.now()
        if "status" in updates:
            logger.info(f"Run {run_id} status changed to: {updates['status']}")
        return True

    def cancel_event(self, run_id: str) -> Optional[threading.Event]:
        with self._lock:
            return self._cancel_events.get(run_id)

    def request_cancel(self, run_id: str) -> bool:
        """Signal the run to stop at its next step. False if unknown or already finished."""
        with self._lock:
            record = self._runs.get(run_id)
            if record is None or record["status"] in FINISHED_STATUSES:
                return False
            self._cancel_events[run_id].set()
        logger.info(f"Cancellation requested for run {run_id}")
        return True

    def list_runs(self, status: Optional[str] = None, limit: Optional[int] = None) -> List[Dict[str, Any]]:
        """Runs newest first, optionally filtered by status."""
        with self._lock:
            runs = [r for r in self._runs.values() if status is None or r["status"] == status]
            runs.sort(key=lambda r: r["created_at"], reverse=True)
            if limit:
                runs = runs[:limit]
            return [r.copy() for r in runs]

    def cleanup_finished_runs(self, max_age_hours: float = 24) -> List[str]:
        """
        Forget finished runs last updated more than ``max_age_hours`` ago.

        Returns:
            List[str]: IDs of the removed runs
        """
        cutoff = datetime.now() - timedelta(hours=max_age_hours)
        with self._lock:
            expired = [
                run_id for run_id, r in self._runs.items()
                if r["status"] in FINISHED_STATUSES and r["updated_at"] <= cutoff
            ]
            for run_id in expired:
                del self._runs[run_id]
                del self._cancel_events[run_id]
        if expired:
            logger.info(f"Cleaned up {len(expired)} finished runs (older than {max_age_hours} hours)")
        return expired

    def get_statistics(self) -> Dict[str, Any]:
        with self._lock:
            by_status: Dict[str, int] = {}
            for record in self._runs.values():
                by_status[record["status"]] = by_status.get(record["status"], 0) + 1
            return {"total": len(self._runs), "by_status": by_status}
