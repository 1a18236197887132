"""Run configuration schema. Unknown keys are rejected at every level."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

NormCase = Literal["linf", "l2"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelConfig(_Strict):
    input_shape: tuple[int, int, int] = (1, 64, 64)
    column_kernels: list[list[int]] = [[7, 5, 5], [5, 3, 3], [3, 3, 3]]
    column_channels: list[list[int]] = [[16, 8, 4], [12, 6, 4], [8, 4, 2]]
    seed: int = 7

    @model_validator(mode="after")
    def _columns_agree(self):
        if len(self.column_kernels) != len(self.column_channels) or not self.column_kernels:
            raise ValueError("column_kernels and column_channels need the same, non-zero length")
        for k, c in zip(self.column_kernels, self.column_channels):
            if len(k) != 3 or len(c) != 3:
                raise ValueError("each column has exactly three conv layers")
            if min(k) < 1 or min(c) < 1:
                raise ValueError("kernel sizes and channel counts must be positive")
        if min(self.input_shape) < 1:
            raise ValueError("input_shape extents must be positive")
        return self


class TrainConfig(_Strict):
    total_epochs: int = Field(400, ge=1)
    warmup_epochs: int = Field(50, ge=0)
    ramp_epochs: int = Field(150, ge=0)
    kappa_start: float = Field(1.0, ge=0.0, le=1.0)
    kappa_end: float = Field(0.5, ge=0.0, le=1.0)
    epsilon_target: float = Field(1.0 / 255.0, ge=0.0)
    epsilon_ramp: Literal["none", "linear"] = "linear"
    optimizer: Literal["sgd", "adam"] = "sgd"
    learning_rate: float = Field(1e-3, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    batch_size: int = Field(8, ge=1)
    seed: int = 0
    norm_case: NormCase = "linf"
    lambda_l1: float = Field(1e-3, ge=0.0)
    beta_l2: float = Field(10.0, ge=0.0)

    @model_validator(mode="after")
    def _schedule_fits(self):
        if self.warmup_epochs + self.ramp_epochs > self.total_epochs:
            raise ValueError("warmup_epochs + ramp_epochs exceeds total_epochs")
        if self.kappa_end > self.kappa_start:
            raise ValueError("kappa_end must not exceed kappa_start")
        return self


class SceneConfig(_Strict):
    canvas: tuple[int, int] = (64, 64)
    count_range: tuple[int, int] = (5, 30)
    head_sigma_px: float = Field(1.5, gt=0.0)
    gt_sigma_px: float = Field(1.5, gt=0.0)
    head_amplitude: float = Field(0.8, gt=0.0)
    noise_std: float = Field(0.02, ge=0.0)
    seed: int = 0

    @model_validator(mode="after")
    def _ranges(self):
        lo, hi = self.count_range
        if lo < 0 or hi < lo:
            raise ValueError("count_range must satisfy 0 <= min <= max")
        if self.canvas[0] % 4 or self.canvas[1] % 4 or min(self.canvas) < 4:
            raise ValueError("canvas extents must be positive multiples of 4")
        return self


class DataConfig(_Strict):
    scene: SceneConfig = SceneConfig()
    n_train: int = Field(200, ge=1)
    n_test: int = Field(50, ge=1)


class EvalConfig(_Strict):
    epsilons: list[float] = [1.0 / 255.0, 3.0 / 255.0, 5.0 / 255.0]
    norms: list[NormCase] = ["linf"]
    attack_samples: int = Field(1000, ge=1)

    @model_validator(mode="after")
    def _nonneg(self):
        if any(e < 0 for e in self.epsilons):
            raise ValueError("epsilons must be non-negative")
        return self


class PathsConfig(_Strict):
    data: Optional[str] = None
    out: Optional[str] = None


class RunConfig(_Strict):
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    data: DataConfig = DataConfig()
    eval: EvalConfig = EvalConfig()
    paths: PathsConfig = PathsConfig()


def load_run_config(path: str | Path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return RunConfig.model_validate(json.load(fh))


def dump_json(cfg: BaseModel) -> str:
    return json.dumps(cfg.model_dump(mode="json"), sort_keys=True, indent=2)
