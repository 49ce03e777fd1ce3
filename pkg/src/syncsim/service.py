"""HTTP service exposing the experiment harness.

Thin wrapper: every endpoint validates a request model, calls the matching
harness function, and returns its report.  Experiment configs are the same
pydantic models the harness uses, so validation errors surface with full
field paths in the 422 response body.
"""

from __future__ import annotations

from typing import Dict, List, Optional

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import harness
from .harness import ExperimentConfig

app = FastAPI(title="syncsim", description="deterministic multi-worker fine-tuning simulator")


class RunRequest(BaseModel):
    config: ExperimentConfig
    force: bool = False


class RunResponse(BaseModel):
    artifact_dir: str
    report: Dict


class SweepRequest(BaseModel):
    config: ExperimentConfig
    axis: str
    force: bool = False


class CostReportRequest(BaseModel):
    cost: Optional[Dict] = None
    out_dir: str = "artifacts/cost"
    force: bool = False


class VerifyRequest(BaseModel):
    config: ExperimentConfig


class VerifyResponse(BaseModel):
    ok: bool
    checks: List[Dict]


class BarrierScanRequest(BaseModel):
    config: ExperimentConfig
    num_points: int = Field(default=21, ge=2)


@app.get("/healthz")
def healthz() -> Dict[str, str]:
    return {"status": "ok"}


@app.post("/run", response_model=RunResponse)
def run(req: RunRequest) -> RunResponse:
    try:
        report = harness.run_experiment(req.config, force=req.force)
    except ValueError as exc:
        raise HTTPException(status_code=400, detail=str(exc))
    run_dir = f"{req.config.output_dir}/run-{harness.config_hash(req.config)}"
    return RunResponse(artifact_dir=run_dir, report=report)


@app.post("/sweep", response_model=RunResponse)
def sweep(req: SweepRequest) -> RunResponse:
    try:
        report = harness.sweep_experiment(req.config, req.axis, force=req.force)
    except ValueError as exc:
        raise HTTPException(status_code=400, detail=str(exc))
    sweep_dir = f"{req.config.output_dir}/sweep-{req.axis}-{harness.config_hash(req.config)}"
    return RunResponse(artifact_dir=sweep_dir, report=report)


@app.post("/costreport", response_model=RunResponse)
def costreport(req: CostReportRequest) -> RunResponse:
    try:
        report = harness.cost_report(req.cost, req.out_dir, force=req.force)
    except (ValueError, KeyError) as exc:
        raise HTTPException(status_code=400, detail=str(exc))
    return RunResponse(artifact_dir=req.out_dir, report=report)


@app.post("/verify-equivalence", response_model=VerifyResponse)
def verify_equivalence(req: VerifyRequest) -> VerifyResponse:
    try:
        ok, checks = harness.verify_equivalence(req.config)
    except ValueError as exc:
        raise HTTPException(status_code=400, detail=str(exc))
    return VerifyResponse(ok=ok, checks=checks)


@app.post("/barrier-scan", response_model=RunResponse)
def barrier_scan(req: BarrierScanRequest) -> RunResponse:
    try:
        report = harness.barrier_scan_report(req.config, req.num_points)
    except ValueError as exc:
        raise HTTPException(status_code=400, detail=str(exc))
    out_dir = f"{req.config.output_dir}/barrier-{harness.config_hash(req.config)}"
    return RunResponse(artifact_dir=out_dir, report=report)
