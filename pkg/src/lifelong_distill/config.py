"""Experiment configuration: one YAML file, validated before any work starts."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .losses import LossWeights
from .policy import PolicyConfig
from .sim import DEFAULT_HORIZON, SuiteKind
from .trainer import Method, TrainConfig

CONFIG_VERSION = 1


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SuiteSection(_Strict):
    kind: Literal["object", "goal", "spatial"] = "object"
    num_tasks: int = Field(5, ge=1)
    demos_per_task: int = Field(20, ge=1)
    seed: int = Field(100, ge=0)
    horizon: int = Field(DEFAULT_HORIZON, ge=1)

    @field_validator("kind", mode="before")
    @classmethod
    def _lower(cls, v):
        return v.lower() if isinstance(v, str) else v


class PolicySection(_Strict):
    latent_dim: int = Field(64, ge=1)
    context_len: int = Field(8, ge=1)
    gmm_components: int = Field(5, ge=1)
    encoder_hidden: int = Field(64, ge=1)
    ffn_hidden: int = Field(64, ge=1)

    def build(self) -> PolicyConfig:
        return PolicyConfig(**self.model_dump())


class WeightsSection(_Strict):
    lambda_i: float = Field(ge=0)
    lambda_t: float = Field(ge=0)
    lambda_e: float = Field(ge=0)
    lambda_p: float = Field(ge=0)


class TrainSection(_Strict):
    method: Literal["sequential", "er", "m2distill"] = "m2distill"
    epochs: int = Field(50, ge=1)
    batch_size: int = Field(16, ge=1)
    lr: float = Field(2e-3, gt=0)
    weights: Optional[WeightsSection] = None  # None -> per-suite preset
    kl_samples: int = Field(16, ge=1)
    eval_epochs: list[int] = Field(default_factory=lambda: [10, 20, 30, 40, 50], min_length=1)
    eval_episodes: int = Field(20, ge=1)
    replay_mix: float = Field(0.5, ge=0, le=1)
    replay_capacity: int = Field(1000, ge=1)
    grad_clip: float = Field(10.0, ge=0)
    eval_workers: int = Field(1, ge=1)

    @field_validator("method", mode="before")
    @classmethod
    def _lower(cls, v):
        return v.lower() if isinstance(v, str) else v

    @model_validator(mode="after")
    def _schedule(self):
        if min(self.eval_epochs) < 1 or max(self.eval_epochs) > self.epochs:
            raise ValueError(f"eval_epochs {self.eval_epochs} must lie within 1..epochs={self.epochs}")
        if len(set(self.eval_epochs)) != len(self.eval_epochs):
            raise ValueError("eval_epochs must be distinct")
        return self

    def build(self, seed: int) -> TrainConfig:
        w = LossWeights(**self.weights.model_dump()) if self.weights is not None else None
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, weights=w,
                           kl_samples=self.kl_samples, eval_epochs=tuple(self.eval_epochs),
                           eval_episodes=self.eval_episodes, replay_mix=self.replay_mix,
                           replay_capacity=self.replay_capacity, grad_clip=self.grad_clip, seed=seed,
                           method=Method.parse(self.method), eval_workers=self.eval_workers)


class ExperimentConfig(_Strict):
    format_version: int = CONFIG_VERSION
    suite: SuiteSection = SuiteSection()
    policy: PolicySection = PolicySection()
    train: TrainSection = TrainSection()
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2], min_length=1)
    out: str = "runs"

    @field_validator("format_version")
    @classmethod
    def _version(cls, v):
        if v != CONFIG_VERSION:
            raise ValueError(f"unsupported config format_version {v}; expected {CONFIG_VERSION}")
        return v

    @field_validator("seeds")
    @classmethod
    def _seeds(cls, v):
        if any(s < 0 for s in v) or len(set(v)) != len(v):
            raise ValueError("seeds must be distinct non-negative integers")
        return v

    @property
    def suite_kind(self) -> SuiteKind:
        return SuiteKind.parse(self.suite.kind)

    def with_overrides(self, *, method: str | None = None, seeds: list[int] | None = None,
                       out: str | None = None) -> "ExperimentConfig":
        data = self.model_dump()
        if method is not None:
            data["train"]["method"] = method
        if seeds is not None:
            data["seeds"] = seeds
        if out is not None:
            data["out"] = out
        return ExperimentConfig.model_validate(data)

    def data_hash(self) -> str:
        """Identifies the generated dataset (suite + demos)."""
        return _digest(self.suite.model_dump())

    def run_hash(self) -> str:
        """Identifies one training run family; seeds and output location excluded."""
        return _digest({"suite": self.suite.model_dump(), "policy": self.policy.model_dump(),
                        "train": self.train.model_dump()})


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


class ConfigError(ValueError):
    pass


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    return parse_config(raw if raw is not None else {}, source=str(path))


def parse_config(raw, source: str = "<config>") -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(), sort_keys=False)
