"""Experiment configuration: a JSON document validated into typed settings."""

from __future__ import annotations

import json
from dataclasses import fields
from pathlib import Path
from typing import Annotated, Any, Literal, Union

from pydantic import BaseModel, ConfigDict, Field, FilePath, TypeAdapter, ValidationError, field_validator, model_validator

from .data import PARTITION_STREAM, Dataset, ShardPlan, load_idx, load_sign_csv, sort_and_shard, synthetic_blobs
from .errors import ConfigError
from .numerics import derive_rng
from .runtime import GlobalConfig, StrategyConfig
from .strategies import REGISTRY

StrategyName = Literal["apple", "fedala", "fedbabu", "fedgc", "fedpac", "fedpcl", "fedproto"]

DATASET_STREAM = 1 << 56


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SyntheticSpec(_Strict):
    kind: Literal["synthetic"]
    num_classes: int = Field(4, ge=1)
    per_class: int = Field(150, ge=1)
    dim: int = Field(8, ge=1)
    spread: float = Field(0.3, ge=0)
    center_scale: float = 1.0

    @model_validator(mode="after")
    def _axes(self):
        if self.dim < self.num_classes:
            raise ValueError(f"dim ({self.dim}) must be >= num_classes ({self.num_classes})")
        return self


class MnistSpec(_Strict):
    kind: Literal["mnist"]
    images: FilePath
    labels: FilePath
    subset: int | None = Field(None, ge=1)


class SignMnistSpec(_Strict):
    kind: Literal["sign_mnist"]
    path: FilePath
    subset: int | None = Field(None, ge=1)


DatasetSpec = Annotated[Union[SyntheticSpec, MnistSpec, SignMnistSpec], Field(discriminator="kind")]


class PartitionSpec(_Strict):
    num_clients: int = Field(20, ge=1)
    shards_per_client: int = Field(2, ge=1)
    shard_size: int = Field(300, ge=1)
    holdout_fraction: float = Field(0.2, gt=0, lt=1)


class TrainingSpec(_Strict):
    rounds: int = Field(ge=1)
    client_fraction: float = Field(1.0, gt=0, le=1)
    local_epochs: int = Field(1, ge=1)
    batch_size: int = Field(32, ge=1)
    local_lr: float = Field(0.05, ge=0)
    seed: int = Field(0, ge=0, lt=2**64)
    hidden_dims: tuple[int, ...] = (128,)
    workers: int = Field(1, ge=1)

    @field_validator("hidden_dims")
    @classmethod
    def _positive(cls, v):
        if any(h < 1 for h in v):
            raise ValueError("hidden layer sizes must be >= 1")
        return v


class StrategySpec(_Strict):
    name: StrategyName
    params: dict[str, Any] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_params(self):
        _, params_cls = REGISTRY[self.name]
        allowed = {f.name for f in fields(params_cls)}
        unknown = sorted(set(self.params) - allowed)
        if unknown:
            raise ValueError(f"unknown key(s) {unknown} for {self.name!r}; allowed: {sorted(allowed)}")
        TypeAdapter(params_cls).validate_python(self.params)
        return self


class OutputSpec(_Strict):
    dir: str = "runs/latest"
    eval_every: int = Field(1, ge=1)


class ExperimentConfig(_Strict):
    dataset: DatasetSpec
    training: TrainingSpec
    strategy: StrategySpec
    partition: PartitionSpec = PartitionSpec()
    output: OutputSpec = OutputSpec()

    def with_overrides(self, *, seed: int | None = None, out: str | None = None) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            cfg = cfg.model_copy(update={"training": cfg.training.model_copy(update={"seed": seed})})
        if out is not None:
            cfg = cfg.model_copy(update={"output": cfg.output.model_copy(update={"dir": out})})
        # re-validate so overrides obey the same rules
        return ExperimentConfig.model_validate(cfg.model_dump(mode="json"))

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"

    def global_config(self) -> GlobalConfig:
        t = self.training
        # typed params (e.g. ints where floats are declared) as the dataclass sees them
        _, params_cls = REGISTRY[self.strategy.name]
        params = TypeAdapter(params_cls).validate_python(self.strategy.params)
        return GlobalConfig(
            rounds=t.rounds,
            num_clients=self.partition.num_clients,
            strategy=StrategyConfig(self.strategy.name, {f.name: getattr(params, f.name) for f in fields(params)}),
            client_fraction=t.client_fraction,
            local_epochs=t.local_epochs,
            batch_size=t.batch_size,
            local_lr=t.local_lr,
            seed=t.seed,
            hidden_dims=tuple(t.hidden_dims),
            holdout_fraction=self.partition.holdout_fraction,
            eval_every=self.output.eval_every,
            workers=t.workers,
        )


def _format_error(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "; ".join(lines)


def validate_config(raw: Any) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(_format_error(exc)) from None


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return validate_config(raw)


def write_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(config.to_json())


def load_dataset(spec: SyntheticSpec | MnistSpec | SignMnistSpec, seed: int) -> Dataset:
    if isinstance(spec, SyntheticSpec):
        return synthetic_blobs(
            spec.num_classes, spec.per_class, spec.dim, spec.spread, derive_rng(seed, DATASET_STREAM), spec.center_scale
        )
    ds = load_idx(spec.images, spec.labels) if isinstance(spec, MnistSpec) else load_sign_csv(spec.path)
    if spec.subset is not None and spec.subset < len(ds):
        ds = ds.subset(range(spec.subset))
    return ds


def build_plan(config: ExperimentConfig, dataset: Dataset) -> ShardPlan:
    p = config.partition
    return sort_and_shard(
        dataset, p.num_clients, p.shards_per_client, p.shard_size, derive_rng(config.training.seed, PARTITION_STREAM)
    )
