#!/usr/bin/env python3
"""
SparseNet Analysis and Training API.
Serves topology inspection, parameter/FLOP analysis and background training runs.
"""

import logging
import os

import uvicorn
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware

from analyzers import analyze
from errors import SparseNetError
from run_registry import RunRegistry
from service_api import init_service_api, router as service_router
from task_manager import BackgroundTaskManager as TaskManager
from topology import PRESETS, PUBLISHED, preset

logger = logging.getLogger(__name__)

app = FastAPI(
    title="SparseNet API",
    description="Sparse DenseNet topology analysis and deterministic training runs",
    version="1.0.0",
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

run_registry = None
task_manager = None


@app.on_event("startup")
async def startup_event():
    """Create the run registry and the training worker pool."""
    global run_registry, task_manager
    run_registry = RunRegistry()
    task_manager = TaskManager(max_workers=int(os.environ.get("SPARSENET_RUNS", "1")))
    init_service_api(run_registry, task_manager)
    logger.info("SparseNet API initialized")


app.include_router(service_router)


@app.on_event("shutdown")
async def shutdown_event():
    if task_manager:
        task_manager.shutdown(wait=False)


@app.get("/")
async def root():
    """Health check and API info."""
    return {
        "message": "SparseNet API",
        "status": "healthy",
        "version": "1.0.0",
        "endpoints": {
            "health": "/health",
            "presets": "/presets",
            "inspect": "/api/v1/inspect",
            "analyze": "/api/v1/analyze",
            "runs": "/api/v1/runs",
        },
    }


@app.get("/health")
async def health_check():
    return {
        "status": "healthy",
        "runs_initialized": run_registry is not None,
        "active_runs": task_manager.get_active_task_count() if task_manager else 0,
        "runs": run_registry.get_statistics() if run_registry else None,
        "ready": True,
    }


@app.get("/presets")
async def list_presets():
    """Named configurations with their published parameter count and depth."""
    return {
        name: {"published_params_m": PUBLISHED[name][0], "published_depth": PUBLISHED[name][1]}
        for name in PRESETS
    }


@app.get("/presets/{name}")
async def analyze_preset(name: str):
    try:
        report = analyze(preset(name))
    except SparseNetError as e:
        raise HTTPException(status_code=404, detail=str(e))
    return dict(report.row(), published_params_m=PUBLISHED[name][0])


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    port = int(os.environ.get("PORT", 8000))
    uvicorn.run(app, host="0.0.0.0", port=port)
