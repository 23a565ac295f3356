"""FastAPI wrapper around the core experiment functions.

Runs execute synchronously inside the request (desk scale: seconds to a
couple of minutes) and their artifacts are kept in process memory, keyed
by run id. Nothing is written to disk here; persistence is the client's
choice.
"""

from __future__ import annotations

import base64
import binascii
import threading
import uuid
from dataclasses import dataclass

from fastapi import FastAPI, HTTPException
from fastapi.responses import PlainTextResponse, Response

from .. import __version__
from ..config import ConfigError, ExperimentConfig, config_from_dict
from ..experiment import evaluate_checkpoint, run_experiment, run_gradcheck
from ..fedruntime import TrainingDiverged
from .schemas import (
    EvalRequest,
    EvalResponse,
    FinalAccuracies,
    GradcheckReport,
    GradcheckRequest,
    HealthResponse,
    RunRequest,
    RunSummary,
)


@dataclass
class StoredRun:
    run_id: str
    metrics_csv: str
    checkpoint: bytes
    resolved_config: str
    summary: RunSummary


class RunStore:
    def __init__(self):
        self._runs: dict[str, StoredRun] = {}
        self._lock = threading.Lock()

    def add(self, run: StoredRun) -> None:
        with self._lock:
            self._runs[run.run_id] = run

    def get(self, run_id: str) -> StoredRun:
        with self._lock:
            run = self._runs.get(run_id)
        if run is None:
            raise HTTPException(status_code=404, detail=f"no run {run_id!r}")
        return run

    def summaries(self) -> list[RunSummary]:
        with self._lock:
            return [r.summary for r in self._runs.values()]


def _parse_config(raw: dict) -> ExperimentConfig:
    try:
        return config_from_dict(raw)
    except ConfigError as e:
        raise HTTPException(status_code=422, detail=e.details) from e


def _diverged(e: TrainingDiverged) -> HTTPException:
    return HTTPException(
        status_code=500,
        detail={
            "error": "training_diverged",
            "round": e.round_idx,
            "client": e.client_id,
            "step": e.step,
            "cause": str(e.cause),
        },
    )


def create_app() -> FastAPI:
    app = FastAPI(title="fedcsap", version=__version__)
    store = RunStore()

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", version=__version__)

    @app.get("/runs", response_model=list[RunSummary])
    def list_runs() -> list[RunSummary]:
        return store.summaries()

    @app.post("/runs", response_model=RunSummary)
    def create_run(req: RunRequest) -> RunSummary:
        cfg = _parse_config(req.config)
        try:
            result = run_experiment(cfg)
        except TrainingDiverged as e:
            raise _diverged(e) from e
        local, base_acc, new, hm = result.final_accuracies
        summary = RunSummary(
            run_id=uuid.uuid4().hex,
            rounds=cfg.fed.rounds,
            reports=len(result.reports),
            final=FinalAccuracies(acc_local=local, acc_base=base_acc, acc_new=new, hm=hm),
            total_bytes=sum(r.bytes_communicated for r in result.reports),
        )
        store.add(
            StoredRun(
                run_id=summary.run_id,
                metrics_csv=result.metrics_csv,
                checkpoint=result.checkpoint,
                resolved_config=result.resolved_config,
                summary=summary,
            )
        )
        return summary

    @app.get("/runs/{run_id}/metrics")
    def run_metrics(run_id: str) -> PlainTextResponse:
        return PlainTextResponse(store.get(run_id).metrics_csv, media_type="text/csv")

    @app.get("/runs/{run_id}/checkpoint")
    def run_checkpoint(run_id: str) -> Response:
        return Response(store.get(run_id).checkpoint, media_type="application/octet-stream")

    @app.get("/runs/{run_id}/config")
    def run_config(run_id: str) -> Response:
        # resolved config is returned verbatim, not re-serialized, so the
        # bytes match what `fedcsap run` writes to disk
        return Response(store.get(run_id).resolved_config, media_type="application/json")

    @app.post("/gradcheck", response_model=GradcheckReport)
    def gradcheck(req: GradcheckRequest) -> GradcheckReport:
        cfg = _parse_config(req.config)
        try:
            result = run_gradcheck(cfg)
        except ValueError as e:
            raise HTTPException(status_code=422, detail=[str(e)]) from e
        return GradcheckReport(
            blocks=result.blocks,
            frozen=result.frozen,
            max_error=result.max_error,
            tolerance=result.tolerance,
            passed=result.passed,
            parameter_count=result.parameter_count,
        )

    @app.post("/eval", response_model=EvalResponse)
    def eval_checkpoint(req: EvalRequest) -> EvalResponse:
        cfg = _parse_config(req.config)
        try:
            blob = base64.b64decode(req.checkpoint_b64, validate=True)
        except (binascii.Error, ValueError) as e:
            raise HTTPException(status_code=422, detail=[f"checkpoint_b64: {e}"]) from e
        try:
            local, base_acc, new, hm = evaluate_checkpoint(cfg, blob)
        except ValueError as e:
            raise HTTPException(status_code=422, detail=[str(e)]) from e
        return EvalResponse(acc_local=local, acc_base=base_acc, acc_new=new, hm=hm)

    return app


app = create_app()
