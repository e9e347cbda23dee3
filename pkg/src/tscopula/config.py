"""Experiment configuration files.

A config is one YAML document validated by :class:`ExperimentConfig`.  A
top-level ``extends: base.yaml`` key (resolved relative to the including
file) deep-merges the base config underneath the current one, so ablations
can differ from their base by a single field.
"""

from __future__ import annotations

from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .model import ModelConfig
from .training import StageConfig, TrainConfig


class ConfigError(ValueError):
    """Config failed to load or validate; ``errors`` lists ``field.path: message`` strings."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid config:\n  " + "\n  ".join(self.errors))


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataSection(_Strict):
    source: Literal["csv", "jsonl", "noisy_sines", "factor_sines", "oracle"] = "factor_sines"
    path: str | None = None
    series_col: str = "series"
    timestamp_col: str = "timestamp"
    value_col: str = "value"
    covariate_cols: list[str] = Field(default_factory=list)
    n_series: int = Field(5, ge=1)
    length: int = Field(600, ge=2)
    frequencies: list[float] = Field(default_factory=lambda: [0.05, 0.1])
    noise_std: float = Field(0.1, ge=0)
    spacing: Literal["regular", "uneven", "unaligned", "uneven+unaligned"] = "regular"
    n_points: int = Field(100_000, ge=10)
    prediction_length: int = Field(5, ge=1)
    history_ratio: int = Field(3, ge=1)
    stride: int | None = Field(None, ge=1)
    reserve_validation: bool = True
    validation_multiple: int = Field(7, ge=1)
    seed: int | None = None

    @model_validator(mode="after")
    def _path_needed(self):
        if self.source in ("csv", "jsonl") and not self.path:
            raise ValueError(f"data.path is required for source={self.source!r}")
        return self


class TaskSection(_Strict):
    kind: Literal["forecast", "interpolation"] = "forecast"


class ModelSection(_Strict):
    n_covariates: int = Field(0, ge=0)
    max_series: int = Field(16, ge=1)
    max_tokens: int = Field(4096, ge=1)
    encoder_layers: int = Field(2, ge=1)
    encoder_heads: int = Field(4, ge=1)
    encoder_head_dim: int = Field(16, ge=1)
    encoder_ffn_dim: int | None = Field(None, ge=1)
    dropout: float = Field(0.0, ge=0, lt=1)
    pe_base: float = Field(10000.0, gt=1)
    flow_layers: int = Field(2, ge=1)
    flow_hidden: int = Field(8, ge=1)
    hypernet_dim: int = Field(32, ge=1)
    hypernet_layers: int = Field(1, ge=0)
    copula_layers: int = Field(1, ge=1)
    copula_heads: int = Field(4, ge=1)
    copula_head_dim: int = Field(8, ge=1)
    u_embed_dim: int = Field(8, ge=1)
    copula_mlp_dim: int = Field(32, ge=1)
    n_bins: int = Field(50, ge=2)
    normalization: Literal["window", "global", "none"] = "window"

    def build(self):
        return ModelConfig(**self.model_dump())


class StageSection(_Strict):
    lr: float = Field(1e-3, gt=0)
    weight_decay: float = Field(0.0, ge=0)
    max_epochs: int = Field(1000, ge=1)
    max_wall_clock: float | None = Field(None, gt=0)
    patience: int | None = Field(None, ge=1)


class TrainSection(_Strict):
    batch_size: int = Field(32, ge=1)
    batches_per_epoch: int = Field(512, ge=1)
    patience: int = Field(50, ge=1)
    grad_clip: float = Field(1e3, gt=0)
    divergence_threshold: float = Field(1e6, gt=0)
    val_batch_size: int = Field(64, ge=1)
    stage1: StageSection = Field(default_factory=StageSection)
    stage2: StageSection = Field(default_factory=StageSection)
    joint: StageSection = Field(default_factory=StageSection)

    def build(self, seed, workers=1):
        d = self.model_dump()
        stages = {k: StageConfig(**d.pop(k)) for k in ("stage1", "stage2", "joint")}
        return TrainConfig(seed=seed, workers=workers, **d, **stages)


class EvalSection(_Strict):
    cutoffs: list[float] = Field(default_factory=list)
    retrain_every: int = Field(1, ge=1)
    n_samples: int = Field(100, ge=1)
    fan_chart: bool = True


class CopulaDemoSection(_Strict):
    n_train: int = Field(100_000, ge=100)
    n_val: int = Field(5_000, ge=10)
    n_test: int = Field(20_000, ge=10)
    n_copula_samples: int = Field(10_000, ge=10)
    modes: list[Literal["curriculum", "joint"]] = Field(default_factory=lambda: ["curriculum", "joint"])


class ExperimentConfig(_Strict):
    seed: int = 0
    mode: Literal["curriculum", "joint"] = "curriculum"
    output_dir: str = "runs/experiment"
    workers: int = Field(1, ge=1)
    data: DataSection = Field(default_factory=DataSection)
    task: TaskSection = Field(default_factory=TaskSection)
    model: ModelSection = Field(default_factory=ModelSection)
    train: TrainSection = Field(default_factory=TrainSection)
    evaluation: EvalSection = Field(default_factory=EvalSection)
    copula_demo: CopulaDemoSection = Field(default_factory=CopulaDemoSection)

    def model_settings(self):
        return self.model.build()

    def train_settings(self):
        return self.train.build(self.seed, self.workers)


def _deep_merge(base, override):
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def _load_raw(path, seen=()):
    path = Path(path).resolve()
    if path in seen:
        raise ConfigError([f"extends: circular reference through {path}"])
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except FileNotFoundError:
        raise ConfigError([f"{path}: file not found"]) from None
    except yaml.YAMLError as exc:
        raise ConfigError([f"{path}: {exc}"]) from None
    if not isinstance(raw, dict):
        raise ConfigError([f"{path}: top level must be a mapping"])
    parent = raw.pop("extends", None)
    if parent is not None:
        base = _load_raw(path.parent / parent, (*seen, path))
        raw = _deep_merge(base, raw)
    return raw


def validate_config(raw):
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        errors = []
        for err in exc.errors():
            loc = ".".join(str(p) for p in err["loc"]) or "<root>"
            errors.append(f"{loc}: {err['msg']}")
        raise ConfigError(errors) from None


def load_config(path, overrides=None):
    """Load, merge ``extends`` chains, apply ``overrides`` (a nested dict) and validate."""
    raw = _load_raw(path)
    if overrides:
        raw = _deep_merge(raw, overrides)
    return validate_config(raw)


def dump_config(config, path):
    Path(path).write_text(yaml.safe_dump(config.model_dump(), sort_keys=False))
