"""Strategy contract, wire messages and helpers shared by the seven algorithms."""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Callable, ClassVar, Literal, Mapping, Sequence

import numpy as np

from ..data import ClientDataset
from ..errors import ConfigError, DimensionError
from ..numerics import (
    ModelParams,
    backward,
    body_forward,
    check_congruent,
    cross_entropy,
    head_forward,
    iterate_minibatches,
    weighted_sum,
)

MessageKind = Literal["model", "body", "head", "core_models", "pac", "prototypes", "prototype_sets", "centroids"]


@dataclass(frozen=True)
class RoundMessage:
    """One upload or download. ``payload`` layout depends on ``kind``."""

    kind: MessageKind
    payload: Mapping[str, Any]
    num_samples: int = 0


@dataclass(frozen=True)
class RunContext:
    """Read-only facts every strategy call may consult."""

    num_clients: int
    num_classes: int
    input_dim: int
    rounds: int
    local_epochs: int
    batch_size: int
    local_lr: float
    initial_model: ModelParams
    train_counts: tuple[int, ...]  # n_i per client


@dataclass(frozen=True)
class ClientResult:
    state: Any
    upload: RoundMessage
    loss: float
    extras: Mapping[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class Personalized:
    predict: Callable[[np.ndarray], np.ndarray]
    params: ModelParams | None = None


class Strategy(ABC):
    name: ClassVar[str]
    state_type: ClassVar[type]

    @abstractmethod
    def setup(self, ctx: RunContext) -> tuple[Any, list[Any]]:
        """Initial server state and one client state per client."""

    @abstractmethod
    def broadcast(self, ctx: RunContext, server: Any, cid: int, rnd: int) -> RoundMessage: ...

    @abstractmethod
    def client_update(
        self,
        ctx: RunContext,
        cid: int,
        state: Any,
        message: RoundMessage,
        data: ClientDataset,
        rng: np.random.Generator,
        rnd: int,
    ) -> ClientResult: ...

    @abstractmethod
    def aggregate(
        self,
        ctx: RunContext,
        server: Any,
        uploads: Mapping[int, RoundMessage],
        states: Sequence[Any],
        rnd: int,
    ) -> tuple[Any, list[Any]]:
        """Fold uploads (ascending client id) into a new server state and client states."""

    @abstractmethod
    def personalize(
        self, ctx: RunContext, server: Any, cid: int, state: Any, data: ClientDataset, rng: np.random.Generator
    ) -> Personalized: ...

    def global_model(self, ctx: RunContext, server: Any, states: Sequence[Any]) -> ModelParams | None:
        """Shared model for global evaluation, or None when the method has none."""
        return None

    def check_states(self, states: Sequence[Any]) -> None:
        for cid, st in enumerate(states):
            if not isinstance(st, self.state_type):
                raise ConfigError(
                    f"client {cid}: state {type(st).__name__} does not match strategy {self.name!r} "
                    f"(expects {self.state_type.__name__})"
                )


def weighted_average(models: Mapping[int, tuple[ModelParams, int]] | Sequence[tuple[ModelParams, int]]) -> ModelParams:
    """Convex combination with weights ``n_i / sum(n)``.

    A mapping is folded in ascending key (client id) order, so the result does
    not depend on insertion order.
    """
    items = [models[k] for k in sorted(models)] if isinstance(models, Mapping) else list(models)
    if not items:
        raise ValueError("weighted_average of an empty list")
    counts = np.array([n for _, n in items], dtype=np.float64)
    if np.any(counts <= 0):
        raise ValueError("sample counts must be positive")
    total = counts.sum()
    return weighted_sum([m for m, _ in items], [n / total for n in counts])


def class_means(
    features: np.ndarray, labels: np.ndarray, num_classes: int
) -> tuple[dict[int, np.ndarray], dict[int, int]]:
    """Per-class mean feature vectors and counts for the classes present."""
    protos: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    for k in range(num_classes):
        mask = labels == k
        n = int(mask.sum())
        if n:
            protos[k] = features[mask].mean(axis=0)
            counts[k] = n
    return protos, counts


def aggregate_prototypes(
    uploads: Mapping[int, tuple[Mapping[int, np.ndarray], Mapping[int, int]]],
    previous: Mapping[int, np.ndarray] | None = None,
) -> dict[int, np.ndarray]:
    """Count-weighted mean per class over the clients holding that class.

    Classes no client reports keep their previous value.
    """
    sums: dict[int, np.ndarray] = {}
    totals: dict[int, int] = {}
    for cid in sorted(uploads):
        protos, counts = uploads[cid]
        for k in sorted(protos):
            n = int(counts[k])
            if n <= 0:
                continue
            sums[k] = sums[k] + n * protos[k] if k in sums else n * protos[k]
            totals[k] = totals.get(k, 0) + n
    out = dict(previous or {})
    for k in sums:
        out[k] = sums[k] / totals[k]
    return dict(sorted(out.items()))


def train_epochs(
    params: ModelParams,
    x: np.ndarray,
    y: np.ndarray,
    *,
    epochs: int,
    batch_size: int,
    lr: float,
    rng: np.random.Generator,
    loss_grad: Callable[[ModelParams, np.ndarray, np.ndarray], tuple[float, ModelParams]] | None = None,
    trainable: Literal["all", "body", "head"] = "all",
) -> tuple[ModelParams, float]:
    """Minibatch SGD; returns the new params and the mean batch loss of the last epoch."""
    if loss_grad is None:
        loss_grad = ce_loss_grad
    n = y.size
    mean_loss = float("nan")
    for _ in range(epochs):
        losses = []
        for idx in iterate_minibatches(n, batch_size, rng):
            loss, g = loss_grad(params, x[idx], y[idx])
            params = apply_step(params, g, lr, trainable)
            losses.append(loss)
        if losses:
            mean_loss = float(np.mean(losses))
    return params, mean_loss


def apply_step(params: ModelParams, grad: ModelParams, lr: float, trainable: str = "all") -> ModelParams:
    check_congruent(params, grad)
    body = params.body
    head = params.head
    if trainable in ("all", "body"):
        body = tuple((w - lr * gw, b - lr * gb) for (w, b), (gw, gb) in zip(params.body, grad.body))
    if trainable in ("all", "head"):
        head = (params.head[0] - lr * grad.head[0], params.head[1] - lr * grad.head[1])
    return ModelParams(body=body, head=head, activation=params.activation)


def ce_loss_grad(params: ModelParams, x: np.ndarray, y: np.ndarray) -> tuple[float, ModelParams]:
    feats, cache = body_forward(params, x)
    loss, d_logits = cross_entropy(head_forward(params.head, feats), y)
    return loss, backward(params, cache, d_logits)


def alignment_penalty(
    features: np.ndarray,
    labels: np.ndarray,
    targets: Mapping[int, np.ndarray],
    weighting: Literal["count", "uniform"],
) -> tuple[float, np.ndarray]:
    """Squared distance between batch class means and target vectors, with d/d features.

    ``count``: classes weighted by their batch share n_k / n (sum over classes).
    ``uniform``: plain mean over the classes present that have a target.
    """
    n = labels.size
    present = [int(k) for k in np.unique(labels) if int(k) in targets]
    grad = np.zeros_like(features)
    if not present:
        return 0.0, grad
    value = 0.0
    for k in present:
        mask = labels == k
        nk = int(mask.sum())
        diff = features[mask].mean(axis=0) - targets[k]
        if diff.shape != targets[k].shape:
            raise DimensionError(f"target for class {k} has shape {targets[k].shape}")
        w = nk / n if weighting == "count" else 1.0 / len(present)
        value += w * float(diff @ diff)
        grad[mask] = (2.0 * w / nk) * diff
    return value, grad


def mean_or_nan(values: Sequence[float]) -> float:
    return float(np.mean(values)) if len(values) else float("nan")
