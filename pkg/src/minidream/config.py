"""Run configuration: one YAML/JSON file, schema-checked before any work, unknown keys rejected.

Section schemas are derived from the library's config dataclasses, minus their ``seed`` fields:
every random stream is a named sub-seed of the single top-level ``seed``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, create_model

from .accel.guidance import DistillConfig
from .accel.tscd import TSCDLossConfig
from .diffusion import StageConfig
from .dit.model import ModelConfig
from .posttrain.refiner import RefinerConfig, RefinerRLHFConfig
from .posttrain.refl import REFLConfig
from .posttrain.reward import RMTrainConfig

STRICT = ConfigDict(extra="forbid")


def section(dc, exclude: tuple[str, ...] = ("seed",), overrides: dict | None = None) -> type[BaseModel]:
    """Pydantic model mirroring dataclass ``dc`` (same names, types and defaults)."""
    hints = typing.get_type_hints(dc)
    overrides = overrides or {}
    fields = {}
    for f in dataclasses.fields(dc):
        if f.name in exclude:
            continue
        default = overrides.get(f.name, f.default)
        if default is dataclasses.MISSING:
            default = f.default_factory() if f.default_factory is not dataclasses.MISSING else ...
        fields[f.name] = (hints[f.name], default)
    return create_model(f"{dc.__name__}Section", __config__=STRICT, **fields)


def build(dc, sec: BaseModel, **extra):
    return dc(**sec.model_dump(), **extra)


ModelSection = section(ModelConfig, exclude=("vocab_size", "image_size", "cond_channels", "guidance_embed"))
StageSection = section(StageConfig, overrides={"steps": 3000, "lr": 2e-3})
RMSection = section(RMTrainConfig, overrides={"steps": 400, "holdout": 0.0})
REFLSection = section(REFLConfig)
RefinerSection = section(RefinerConfig)
RefinerRLHFSection = section(RefinerRLHFConfig)
DistillSection = section(DistillConfig)
TSCDSection = section(TSCDLossConfig)


class DataSection(BaseModel):
    model_config = STRICT
    n_items: int = Field(8, ge=1)
    image_size: int = Field(16, ge=8)
    max_chars: int = Field(2, ge=1)
    cjk_fraction: float = Field(0.5, ge=0.0, le=1.0)


class PreferenceSection(BaseModel):
    model_config = STRICT
    n_items: int = Field(1000, ge=1)
    per_item: int = Field(2, ge=1)


class RLHFSection(BaseModel):
    model_config = STRICT
    preferences: PreferenceSection = PreferenceSection()
    rm: RMSection = RMSection()
    refl: REFLSection = REFLSection()
    rounds: int = Field(1, ge=1)
    refl_steps: int = Field(10, ge=1)
    batch_size: int = Field(8, ge=1)


class RefineSection(BaseModel):
    model_config = STRICT
    train: RefinerSection = RefinerSection()
    strength: float = Field(0.5, ge=0.0, le=1.0)
    steps: int = Field(16, ge=1)


class TSCDScheduleSection(BaseModel):
    model_config = STRICT
    stages: tuple[int, ...] = (16, 8, 4, 2, 1)
    steps_per_stage: int = Field(200, ge=1)


class QuantSection(BaseModel):
    model_config = STRICT
    plan: Literal["search", "int8-per-channel"] = "int8-per-channel"
    bit_options: tuple[int, ...] = (4, 8, 16)
    budget: float = Field(2e-3, gt=0)
    calib_batches: int = Field(4, ge=1)
    calib_batch_size: int = Field(16, ge=1)
    finetune_steps: int = Field(0, ge=0)
    finetune_lr: float = Field(1e-4, gt=0)
    smooth: bool = True


class AccelSection(BaseModel):
    model_config = STRICT
    cfg: DistillSection = DistillSection()
    tscd: TSCDSection = TSCDSection()
    tscd_schedule: TSCDScheduleSection = TSCDScheduleSection()
    quant: QuantSection = QuantSection()
    few_steps: int = Field(2, ge=1)


class EvalSection(BaseModel):
    model_config = STRICT
    steps: int = Field(32, ge=1)
    w: float = Field(2.0, ge=0.0)
    batch_size: Optional[int] = Field(None, ge=1)


class RunConfig(BaseModel):
    model_config = STRICT
    seed: int = 0
    data: DataSection = DataSection()
    model: ModelSection = ModelSection()
    stages: list[StageSection] = [StageSection()]
    rlhf: RLHFSection = RLHFSection()
    refine: RefineSection = RefineSection()
    accel: AccelSection = AccelSection()
    eval: EvalSection = EvalSection()

    def stage(self, name: str) -> StageSection:
        for s in self.stages:
            if s.stage == name:
                return s
        raise KeyError(f"stage {name!r} not in the configured schedule {[s.stage for s in self.stages]}")

    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self).encode()).hexdigest()


def canonical_json(cfg: RunConfig) -> str:
    return json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


def subseed(seed: int, name: str) -> int:
    """Deterministic 31-bit seed for the stream called ``name``."""
    h = hashlib.sha256(f"{int(seed)}/{name}".encode()).digest()
    return int.from_bytes(h[:4], "little") & 0x7FFFFFFF


def load_config(path: str | Path | None, seed: int | None = None) -> RunConfig:
    """Parse and validate; ``seed`` (from the environment) overrides the file's value."""
    data = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ValueError(f"{path}: top level must be a mapping")
    if seed is not None:
        data = {**data, "seed": seed}
    return RunConfig.model_validate(data)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=True, allow_unicode=True)
