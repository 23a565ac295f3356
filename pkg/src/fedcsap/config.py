"""Experiment configuration: strict JSON schema with unknown-key rejection.

Every run is fully described by one ExperimentConfig; the resolved form
(defaults filled in) is serialized next to the metrics so a run can be
reproduced byte-for-byte from its own output directory. One master seed
derives every stream through named splitting, so adding a new consumer
never perturbs existing ones.
"""

from __future__ import annotations

import json

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .datagen import StyleParams, SyntheticTaskConfig


class ConfigError(ValueError):
    """Invalid configuration; ``details`` lists field-path diagnostics."""

    def __init__(self, details: list[str]):
        self.details = details
        super().__init__("; ".join(details))


class DomainSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    brightness_shift: float = 0.0
    contrast_scale: float = 1.0
    channel_bias: list[float] = Field(default_factory=list)


class DataSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    num_classes: int = 16
    shots_per_class: int = 8
    image_shape: tuple[int, int, int] = (3, 16, 16)
    class_margin: float = 1.0
    noise_sigma: float = 0.05
    domains: list[DomainSection] = Field(
        default_factory=lambda: [
            DomainSection(brightness_shift=0.0, contrast_scale=1.0, channel_bias=[0.0, 0.0, 0.0]),
            DomainSection(brightness_shift=0.5, contrast_scale=1.3, channel_bias=[0.2, -0.1, 0.05]),
        ]
    )

    @model_validator(mode="after")
    def _bias_matches_channels(self):
        c = self.image_shape[0]
        for i, dom in enumerate(self.domains):
            if len(dom.channel_bias) == 0:
                dom.channel_bias = [0.0] * c
            elif len(dom.channel_bias) != c:
                raise ValueError(f"domains[{i}].channel_bias has {len(dom.channel_bias)} entries for {c} channels")
        return self


class ModelSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    d: int = 32
    m: int = 4
    heads: int = 4
    L: int = 3
    stage_shapes: list[tuple[int, int, int]] = Field(
        default_factory=lambda: [(8, 8, 4), (4, 4, 8), (2, 2, 16)]
    )
    q_se: int = 2
    r: int = 4

    @model_validator(mode="after")
    def _consistent(self):
        if self.L != len(self.stage_shapes):
            raise ValueError(f"L={self.L} but stage_shapes has {len(self.stage_shapes)} stages")
        if self.d < 1 or self.m < 1 or self.heads < 1:
            raise ValueError("d, m, and heads must be positive")
        if self.d % self.heads != 0:
            raise ValueError(f"d={self.d} must be divisible by heads={self.heads}")
        if self.q_se < 1:
            raise ValueError(f"q_se must be >= 1, got {self.q_se}")
        if self.r < 1:
            raise ValueError(f"r must be >= 1, got {self.r}")
        return self


class LossSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    tau: float = 0.01
    lambda_crp: float = 0.1

    @model_validator(mode="after")
    def _valid(self):
        if self.tau <= 0.0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.lambda_crp < 0.0:
            raise ValueError(f"lambda_crp must be >= 0, got {self.lambda_crp}")
        return self


class FedSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    rounds: int = 100
    local_steps: int = 4
    lr: float = 0.02
    participation: float = 1.0
    lr_schedule: str = "constant"
    batch_size: int | None = None
    weighted: bool = False
    classes_per_client: int = 4

    @model_validator(mode="after")
    def _valid(self):
        if self.rounds < 0:
            raise ValueError(f"rounds must be >= 0, got {self.rounds}")
        if self.local_steps < 0:
            raise ValueError(f"local_steps must be >= 0, got {self.local_steps}")
        if self.lr < 0.0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if not 0.0 < self.participation <= 1.0:
            raise ValueError(f"participation must be in (0, 1], got {self.participation}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1 or null, got {self.batch_size}")
        if self.classes_per_client < 1:
            raise ValueError(f"classes_per_client must be >= 1, got {self.classes_per_client}")
        return self


class AblationSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    disable_injection: bool = False
    static_prompts: bool = False
    crp_variant: str = "normalized"

    @model_validator(mode="after")
    def _valid(self):
        if self.crp_variant not in ("normalized", "unnormalized"):
            raise ValueError(f"crp_variant must be 'normalized' or 'unnormalized', got {self.crp_variant!r}")
        return self


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    data: DataSection = Field(default_factory=DataSection)
    model: ModelSection = Field(default_factory=ModelSection)
    loss: LossSection = Field(default_factory=LossSection)
    fed: FedSection = Field(default_factory=FedSection)
    ablations: AblationSection = Field(default_factory=AblationSection)
    eval_cadence: int = 1
    master_seed: int = 0
    output_dir: str | None = None

    @model_validator(mode="after")
    def _valid(self):
        if self.eval_cadence < 1:
            raise ValueError(f"eval_cadence must be >= 1, got {self.eval_cadence}")
        if self.fed.rounds % self.eval_cadence != 0:
            raise ValueError(f"eval_cadence={self.eval_cadence} must divide rounds={self.fed.rounds}")
        base_count = (self.data.num_classes + 1) // 2
        if base_count % self.fed.classes_per_client != 0:
            raise ValueError(
                f"{base_count} base classes do not divide into blocks of {self.fed.classes_per_client}"
            )
        if self.fed.batch_size is not None:
            shard_examples = self.fed.classes_per_client * self.data.shots_per_class
            if self.fed.batch_size > shard_examples:
                raise ValueError(
                    f"batch_size={self.fed.batch_size} exceeds the {shard_examples} examples in a shard"
                )
        spatial = self.data.image_shape[1] * self.data.image_shape[2]
        first = self.model.stage_shapes[0]
        if first[0] * first[1] > spatial:
            raise ValueError(f"first stage {first} is larger than the {spatial}-pixel image plane")
        return self

    def task_config(self) -> SyntheticTaskConfig:
        domains = [
            StyleParams(
                brightness_shift=d.brightness_shift,
                contrast_scale=d.contrast_scale,
                channel_bias=np.asarray(d.channel_bias),
            )
            for d in self.data.domains
        ]
        return SyntheticTaskConfig(
            num_classes=self.data.num_classes,
            shots_per_class=self.data.shots_per_class,
            domains=domains,
            image_shape=self.data.image_shape,
            class_margin=self.data.class_margin,
            noise_sigma=self.data.noise_sigma,
            seed=self.master_seed,
        )

    def resolved_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def _format_errors(err: ValidationError) -> list[str]:
    out = []
    for item in err.errors():
        path = ".".join(str(p) for p in item["loc"]) or "<root>"
        out.append(f"{path}: {item['msg']}")
    return out


def load_config(text: str) -> ExperimentConfig:
    """Parse and validate a JSON config; raises ConfigError with field paths."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError([f"<json>: {e}"]) from e
    return config_from_dict(raw)


def config_from_dict(raw: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(_format_errors(e)) from e
