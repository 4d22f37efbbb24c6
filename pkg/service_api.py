#!/usr/bin/env python3
"""
HTTP endpoints for model inspection, analysis and background training runs.
"""

import logging
import os
from concurrent.futures import Future
from dataclasses import asdict
from typing import Any, Dict, List, Optional, Union

from fastapi import APIRouter, HTTPException
from pydantic import BaseModel, Field

from analyzers import analyze
from config import default_data_dir, network_spec_from_section
from errors import SparseNetError
from run_registry import RunRegistry
from task_manager import BackgroundTaskManager as TaskManager
from topology import NetworkSpec, build_layer_graph, ensure_valid
from trainer import MetricsRow, TrainConfig, load_datasets, train, train_config_from_section

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/api/v1", tags=["SparseNet"])

# Finished runs older than this are forgotten when a new run is submitted
RUN_RETENTION_HOURS = float(os.environ.get("SPARSENET_RUN_RETENTION_HOURS", "24"))

# Initialized in app.py
run_registry: Optional[RunRegistry] = None
task_manager: Optional[TaskManager] = None


def init_service_api(registry: RunRegistry, manager: TaskManager) -> None:
    global run_registry, task_manager
    run_registry = registry
    task_manager = manager


class ModelRequest(BaseModel):
    """Either a preset name or explicit [model] fields."""

    preset: Optional[str] = None
    variant: Optional[str] = None
    blocks: Optional[Union[str, List[int]]] = None
    growth_rate: Optional[int] = None
    path: Optional[Union[int, str]] = None
    farthest: Optional[int] = None
    nearest: Optional[int] = None
    compression: Optional[float] = None
    stem_channels: Optional[int] = None
    num_classes: Optional[int] = None
    attention_reduction: Optional[int] = None
    input_size: Optional[int] = None
    name: Optional[str] = None

    def to_spec(self) -> NetworkSpec:
        values: Dict[str, str] = {}
        for key, value in self.model_dump(exclude_none=True).items():
            values[key] = ",".join(str(v) for v in value) if isinstance(value, list) else str(value)
        return ensure_valid(network_spec_from_section(values))


class RunRequest(BaseModel):
    model: ModelRequest
    train: Dict[str, Union[str, int, float, bool]] = Field(default_factory=dict)
    data_dir: Optional[str] = None
    out_dir: str


class RunResponse(BaseModel):
    run_id: str
    status: str
    message: str


def _require_service() -> None:
    if not run_registry or not task_manager:
        raise HTTPException(status_code=503, detail="Service not initialized")


def _spec_or_400(request: ModelRequest) -> NetworkSpec:
    try:
        return request.to_spec()
    except SparseNetError as e:
        raise HTTPException(status_code=400, detail=str(e))


@router.post("/inspect")
async def inspect_model(request: ModelRequest):
    """Per-layer sources and channel counts."""
    spec = _spec_or_400(request)
    graph = build_layer_graph(spec)
    layers = [
        {
            "block": block.index,
            "layer": layer.index,
            "sources": list(layer.sources),
            "in_channels": layer.in_channels,
            "bottleneck_channels": layer.bottleneck_channels,
            "out_channels": layer.out_channels,
        }
        for block, layer in graph.layers()
    ]
    return {"name": spec.display_name, "layers": layers, "classifier_in": graph.classifier_in,
            "text": graph.describe()}


@router.post("/analyze")
async def analyze_model(request: ModelRequest, input_size: Optional[int] = None):
    spec = _spec_or_400(request)
    return asdict(analyze(spec, input_size))


def _run_training(run_id: str, spec: NetworkSpec, config: TrainConfig, data_dir: str) -> Dict[str, Any]:
    registry = run_registry
    registry.update_run(run_id, status="running")

    def progress(epoch: int, total: int, row: MetricsRow) -> None:
        registry.update_run(
            run_id, epoch=epoch, progress=int(100 * epoch / max(total, 1)), last_metrics=asdict(row)
        )

    train_data, test_data = load_datasets(data_dir, config)
    result = train(spec, config, train_data, test_data,
                   cancel_event=registry.cancel_event(run_id), progress_callback=progress)
    return {
        "metrics": str(result.metrics_path),
        "final_checkpoint": str(result.final_checkpoint),
        "best_checkpoint": str(result.best_checkpoint) if result.best_checkpoint else None,
        "final_eval": asdict(result.final_eval) if result.final_eval else None,
        "best_eval": asdict(result.best_eval) if result.best_eval else None,
    }


def _record_outcome(run_id: str, future: Future) -> None:
    if future.cancelled():
        run_registry.update_run(run_id, status="cancelled")
        return
    status = task_manager.get_task_status(run_id) or {}
    if status.get("status") == "completed":
        run_registry.update_run(run_id, status="completed", progress=100, result=future.result())
    else:
        run_registry.update_run(run_id, status=status.get("status", "failed"), error=status.get("error"))


def _prune_finished_runs(max_age_hours: float) -> int:
    removed = run_registry.cleanup_finished_runs(max_age_hours)
    task_manager.forget_tasks(removed)
    return len(removed)


@router.post("/runs", response_model=RunResponse)
async def submit_run(request: RunRequest):
    """Start a training run in the background."""
    _require_service()
    spec = _spec_or_400(request.model)
    data_dir = request.data_dir or default_data_dir()
    if not data_dir:
        raise HTTPException(status_code=400, detail="data_dir is required (or set SPARSENET_DATA_DIR)")
    try:
        config = train_config_from_section({k: str(v) for k, v in request.train.items()},
                                           out_dir=request.out_dir)
    except SparseNetError as e:
        raise HTTPException(status_code=400, detail=str(e))

    _prune_finished_runs(RUN_RETENTION_HOURS)
    run_id = run_registry.create_run(
        spec.display_name, config.out_dir, config.epochs,
        {"model": spec.model_dump(mode="json"), "train": config.model_dump(mode="json")},
    )
    task_manager.submit_task(run_id, _run_training, run_id, spec, config, data_dir, on_done=_record_outcome)
    return RunResponse(run_id=run_id, status="queued", message="Training run submitted")


@router.get("/runs")
async def list_runs(status: Optional[str] = None, limit: Optional[int] = None):
    _require_service()
    return {"runs": run_registry.list_runs(status=status, limit=limit)}


@router.delete("/runs")
async def prune_runs(max_age_hours: float = RUN_RETENTION_HOURS):
    """Forget finished runs last updated more than ``max_age_hours`` ago."""
    _require_service()
    if max_age_hours < 0:
        raise HTTPException(status_code=400, detail="max_age_hours must be >= 0")
    return {"removed": _prune_finished_runs(max_age_hours), "statistics": run_registry.get_statistics()}


@router.get("/runs/{run_id}")
async def get_run(run_id: str):
    _require_service()
    record = run_registry.get_run(run_id)
    if not record:
        raise HTTPException(status_code=404, detail="Run not found")
    record.pop("params", None)
    return record


@router.delete("/runs/{run_id}", response_model=RunResponse)
async def cancel_run(run_id: str):
    """Cancel a queued run or ask a running one to stop at its next step."""
    _require_service()
    record = run_registry.get_run(run_id)
    if not record:
        raise HTTPException(status_code=404, detail="Run not found")
    if not run_registry.request_cancel(run_id):
        raise HTTPException(status_code=400, detail=f"Run already {record['status']}")
    if task_manager.cancel_task(run_id):
        run_registry.update_run(run_id, status="cancelled")
    return RunResponse(run_id=run_id, status="cancelling", message="Cancellation requested")
