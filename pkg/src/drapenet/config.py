"""Run configuration: one YAML/JSON file plus command-line overrides (flags win)."""
from __future__ import annotations

import json
from os import PathLike
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .losses import LossWeights
from .model import ModelConfig
from .sim import SHAPE_RANGES, SimConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetSection(_Strict):
    n_samples: int = Field(60, gt=0)
    garment: Literal["grid", "tube", "tshirt"] = "grid"
    resolution: tuple[int, int] = (20, 20)
    # sewing-parameter analog: sample (width, length) scales per sample and feed them as the condition vector
    vary_template: bool = False
    size_range: tuple[float, float] = (0.9, 1.1)
    pose_scale: float = Field(1.0, ge=0)
    height_range: tuple[float, float] = SHAPE_RANGES[0]
    torso_range: tuple[float, float] = SHAPE_RANGES[1]
    limb_range: tuple[float, float] = SHAPE_RANGES[2]
    splits: tuple[float, float, float] = (0.6, 0.2, 0.2)
    body_n_around: int = Field(10, ge=3)
    body_spacing: float = Field(0.06, gt=0)

    @model_validator(mode="after")
    def _check(self):
        if abs(sum(self.splits) - 1.0) > 1e-9 or min(self.splits) < 0:
            raise ValueError("splits must be nonnegative and sum to 1")
        for (lo, hi), (a, b), name in zip(SHAPE_RANGES, (self.height_range, self.torso_range, self.limb_range),
                                          ("height_range", "torso_range", "limb_range")):
            if not lo <= a <= b <= hi:
                raise ValueError(f"{name} must lie within [{lo}, {hi}]")
        if min(self.resolution) < 2:
            raise ValueError("resolution must be at least 2x2")
        return self


class SimSection(_Strict):
    iterations: int = Field(8, gt=0)
    tolerance: float = Field(2e-5, gt=0)
    max_steps: int = Field(4000, gt=0)
    gravity: tuple[float, float, float] = (0.0, -9.81, 0.0)
    dt: float = Field(1.0 / 60.0, gt=0)
    stretch_stiffness: float = Field(1.0, ge=0, le=1)
    bend_stiffness: float = Field(0.1, ge=0, le=1)
    collision_margin: Optional[float] = None

    def build(self) -> SimConfig:
        return SimConfig(**self.model_dump())


class ModelSection(_Strict):
    preset: Literal["default", "desk", "tiny"] = "desk"
    variant: Literal["late", "global", "local"] = "local"
    condition_dim: int = Field(0, ge=0)
    overrides: dict = Field(default_factory=dict)  # any ModelConfig field

    def build(self, seed: int = 0, condition_dim: int | None = None) -> ModelConfig:
        kw = dict(self.overrides)
        kw.setdefault("init_seed", seed)
        kw["variant"] = self.variant
        kw["condition_dim"] = self.condition_dim if condition_dim is None else condition_dim
        if self.preset == "desk":
            return ModelConfig.desk(**kw)
        if self.preset == "tiny":
            return ModelConfig.tiny(**kw)
        return ModelConfig(**kw)


class LossSection(_Strict):
    pen: float = Field(1.0, ge=0)
    norm: float = Field(0.3, ge=0)
    bend: float = Field(0.5, ge=0)
    d_tol: float = Field(0.05, ge=0)
    normal_extension_frac: float = Field(0.2, ge=0)

    def build(self) -> LossWeights:
        return LossWeights(**self.model_dump())


class TrainSection(_Strict):
    epochs: int = Field(30, gt=0)
    lr: float = Field(1e-3, ge=0)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    accumulate: int = Field(1, gt=0)  # samples per optimizer step
    stop_below: float | None = Field(None, gt=0)  # end early once validation e_dist drops below this


class EvalSection(_Strict):
    split: Literal["train", "val", "test"] = "test"


class BenchSection(_Strict):
    repetitions: int = Field(5, gt=0)
    resolution: tuple[int, int] = (45, 45)
    garment: Literal["grid", "tube", "tshirt"] = "grid"


class RunConfig(_Strict):
    seed: int = 0
    threads: int = Field(1, gt=0)
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    sim: SimSection = Field(default_factory=SimSection)
    model: ModelSection = Field(default_factory=ModelSection)
    loss: LossSection = Field(default_factory=LossSection)
    train: TrainSection = Field(default_factory=TrainSection)
    eval: EvalSection = Field(default_factory=EvalSection)
    bench: BenchSection = Field(default_factory=BenchSection)


def load_config(path: str | PathLike | None = None, overrides: dict | None = None) -> RunConfig:
    """Read a YAML or JSON file (YAML is a superset) and apply dotted-key overrides."""
    data = {}
    if path is not None:
        text = Path(path).read_text()
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ValueError(f"{path}: top level must be a mapping")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        node = data
        *head, last = key.split(".")
        for part in head:
            node = node.setdefault(part, {})
        node[last] = value
    return RunConfig.model_validate(data)


def echo_config(cfg: RunConfig, out_dir: str | PathLike) -> Path:
    path = Path(out_dir) / "config.json"
    path.write_text(json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True) + "\n")
    return path
