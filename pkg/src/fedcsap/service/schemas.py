"""Request and response bodies for the HTTP service.

Configs travel as plain JSON objects and are validated by the core
schema on the server side, so the service and the CLI produce the same
field-path diagnostics for the same mistake.
"""

from __future__ import annotations

from pydantic import BaseModel, ConfigDict, Field


class RunRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    config: dict = Field(description="experiment config object, same schema as the config file")


class FinalAccuracies(BaseModel):
    acc_local: float
    acc_base: float
    acc_new: float
    hm: float


class RunSummary(BaseModel):
    run_id: str
    rounds: int
    reports: int
    final: FinalAccuracies
    total_bytes: int


class GradcheckRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    config: dict


class GradcheckReport(BaseModel):
    blocks: dict[str, float]
    frozen: list[str]
    max_error: float
    tolerance: float
    passed: bool
    parameter_count: int


class EvalRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    config: dict
    checkpoint_b64: str = Field(description="base64 of a .fckp checkpoint blob")


class EvalResponse(BaseModel):
    acc_local: float
    acc_base: float
    acc_new: float
    hm: float


class HealthResponse(BaseModel):
    status: str
    version: str
