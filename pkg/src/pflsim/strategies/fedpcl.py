"""FedPCL: prototype-contrastive training of a projection over a fixed backbone.

Only class prototypes travel; the backbone (a frozen body) never changes and
the projection never leaves the client.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from ..data import ClientDataset
from ..errors import ConfigError
from ..numerics import Layer, ModelParams, body_forward, iterate_minibatches, log_softmax, softmax
from .base import ClientResult, Personalized, RoundMessage, RunContext, Strategy, aggregate_prototypes, class_means

_EPS = 1e-12


@dataclass(frozen=True)
class PclParams:
    tau: float = 0.5


@dataclass(frozen=True)
class PclState:
    projection: Layer  # trainable [F, F] weight and [F] bias
    tau: float
    local_prototypes: dict[int, np.ndarray] | None = None
    counts: dict[int, int] | None = None


@dataclass(frozen=True)
class PclServer:
    global_prototypes: dict[int, np.ndarray]
    local_sets: dict[int, dict[int, np.ndarray]]  # client id -> that client's prototypes


def embed(projection: Layer, backbone_features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit-norm embedding z and the raw projection u it came from."""
    w, b = projection
    u = backbone_features @ w.T + b
    norm = np.linalg.norm(u, axis=1, keepdims=True)
    return u / np.maximum(norm, _EPS), u


def _contrastive(z: np.ndarray, y: np.ndarray, protos: Mapping[int, np.ndarray], tau: float):
    """Mean -log softmax(z.C(y)/tau) over the classes in ``protos``; skips samples whose class is absent."""
    classes = sorted(protos)
    valid = np.isin(y, classes)
    grad = np.zeros_like(z)
    n_valid = int(valid.sum())
    if n_valid == 0:
        return 0.0, grad, int(y.size)
    mat = np.stack([protos[k] for k in classes])
    pos = np.searchsorted(classes, y[valid])
    logits = z[valid] @ mat.T / tau
    logp = log_softmax(logits)
    loss = -float(logp[np.arange(n_valid), pos].mean())
    d = softmax(logits)
    d[np.arange(n_valid), pos] -= 1.0
    grad[valid] = (d @ mat) / (tau * n_valid)
    return loss, grad, int(y.size - n_valid)


def fedpcl_losses(
    z: np.ndarray,
    y: np.ndarray,
    global_prototypes: Mapping[int, np.ndarray],
    local_sets: Mapping[int, Mapping[int, np.ndarray]],
    tau: float,
) -> tuple[float, float, np.ndarray, int]:
    """Global and local contrastive losses on embeddings ``z``.

    Returns ``(L_g, L_p, dL/dz, skipped)`` where L_p is the mean over the
    non-empty prototype sets and ``skipped`` counts (sample, set) pairs whose
    label had no prototype.
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    l_g, grad, skipped = _contrastive(z, y, global_prototypes, tau)
    sets = [local_sets[p] for p in sorted(local_sets) if local_sets[p]]
    l_p = 0.0
    for protos in sets:
        val, g, s = _contrastive(z, y, protos, tau)
        l_p += val / len(sets)
        grad = grad + g / len(sets)
        skipped += s
    return l_g, l_p, grad, skipped


def fedpcl_loss_and_grad(
    projection: Layer,
    backbone_features: np.ndarray,
    y: np.ndarray,
    global_prototypes: Mapping[int, np.ndarray],
    local_sets: Mapping[int, Mapping[int, np.ndarray]],
    tau: float,
) -> tuple[float, Layer, int]:
    """L_g + L_p and its gradient w.r.t. the projection parameters."""
    z, u = embed(projection, backbone_features)
    l_g, l_p, dz, skipped = fedpcl_losses(z, y, global_prototypes, local_sets, tau)
    norm = np.maximum(np.linalg.norm(u, axis=1, keepdims=True), _EPS)
    du = (dz - (dz * z).sum(axis=1, keepdims=True) * z) / norm
    return l_g + l_p, (du.T @ backbone_features, du.sum(axis=0)), skipped


def prototype_predict(z: np.ndarray, protos: Mapping[int, np.ndarray]) -> np.ndarray:
    if not protos:
        return np.zeros(z.shape[0], dtype=np.int64)
    classes = np.array(sorted(protos))
    scores = z @ np.stack([protos[k] for k in classes]).T
    return classes[np.argmax(scores, axis=1)]


class FedPcl(Strategy):
    name = "fedpcl"
    state_type = PclState

    def __init__(self, params: PclParams | None = None):
        self.params = params or PclParams()

    def setup(self, ctx: RunContext):
        f = ctx.initial_model.feature_dim
        projection = (np.eye(f), np.zeros(f))
        return PclServer({}, {}), [PclState(projection, self.params.tau) for _ in range(ctx.num_clients)]

    @staticmethod
    def backbone(ctx: RunContext) -> ModelParams:
        return ctx.initial_model

    def broadcast(self, ctx, server: PclServer, cid, rnd):
        return RoundMessage(
            "prototype_sets", {"global": server.global_prototypes, "local_sets": server.local_sets}
        )

    def client_update(self, ctx, cid, state: PclState, message, data: ClientDataset, rng, rnd):
        global_protos = message.payload["global"]
        local_sets = message.payload["local_sets"]
        feats, _ = body_forward(self.backbone(ctx), data.train_x)
        proj = state.projection
        losses, skipped = [], 0
        if global_protos:
            for _ in range(ctx.local_epochs):
                for idx in iterate_minibatches(data.n_train, ctx.batch_size, rng):
                    loss, (gw, gb), s = fedpcl_loss_and_grad(
                        proj, feats[idx], data.train_y[idx], global_protos, local_sets, state.tau
                    )
                    proj = (proj[0] - ctx.local_lr * gw, proj[1] - ctx.local_lr * gb)
                    losses.append(loss)
                    skipped += s
        z, _ = embed(proj, feats)
        protos, counts = class_means(z, data.train_y, ctx.num_classes)
        new_state = replace(state, projection=proj, local_prototypes=protos, counts=counts)
        upload = RoundMessage("prototypes", {"prototypes": protos, "counts": counts}, data.n_train)
        loss = float(np.mean(losses)) if losses else float("nan")
        return ClientResult(new_state, upload, loss, {"skipped": float(skipped)})

    def aggregate(self, ctx, server: PclServer, uploads, states, rnd):
        pairs = {cid: (m.payload["prototypes"], m.payload["counts"]) for cid, m in uploads.items()}
        global_protos = aggregate_prototypes(pairs, server.global_prototypes)
        local_sets = dict(server.local_sets)
        for cid in sorted(uploads):
            local_sets[cid] = uploads[cid].payload["prototypes"]
        return PclServer(global_protos, dict(sorted(local_sets.items()))), list(states)

    def personalize(self, ctx, server: PclServer, cid, state: PclState, data, rng):
        backbone = self.backbone(ctx)
        protos = server.global_prototypes

        def _predict(x):
            z, _ = embed(state.projection, body_forward(backbone, x)[0])
            return prototype_predict(z, protos)

        return Personalized(_predict)
