"""FedProto: local models regularised toward global class prototypes; only prototypes are shared."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from ..data import ClientDataset
from ..numerics import ModelParams, backward, body_forward, cross_entropy, head_forward, predict
from .base import ClientResult, Personalized, RoundMessage, RunContext, Strategy, aggregate_prototypes, alignment_penalty, class_means, train_epochs


@dataclass(frozen=True)
class ProtoParams:
    lam: float = 1.0


@dataclass(frozen=True)
class ProtoState:
    model: ModelParams
    lam: float
    local_prototypes: dict[int, np.ndarray] | None = None
    global_prototypes: dict[int, np.ndarray] | None = None
    counts: dict[int, int] | None = None


def prototype_distance(
    features: np.ndarray, labels: np.ndarray, global_prototypes: Mapping[int, np.ndarray]
) -> tuple[float, np.ndarray]:
    """L_R: mean over classes present of ||local prototype - global prototype||^2, with d/d features."""
    return alignment_penalty(features, labels, global_prototypes, weighting="uniform")


def fedproto_loss_and_grad(
    params: ModelParams,
    x: np.ndarray,
    y: np.ndarray,
    global_prototypes: Mapping[int, np.ndarray] | None,
    lam: float,
) -> tuple[float, ModelParams]:
    """L_S + lam * L_R; the regulariser is dropped while no global prototypes exist."""
    feats, cache = body_forward(params, x)
    ce, d_logits = cross_entropy(head_forward(params.head, feats), y)
    if not global_prototypes or lam == 0:
        return ce, backward(params, cache, d_logits)
    reg, d_feats = prototype_distance(feats, y, global_prototypes)
    return ce + lam * reg, backward(params, cache, d_logits, lam * d_feats)


class FedProto(Strategy):
    name = "fedproto"
    state_type = ProtoState

    def __init__(self, params: ProtoParams | None = None):
        self.params = params or ProtoParams()

    def setup(self, ctx: RunContext):
        return {}, [ProtoState(ctx.initial_model, self.params.lam) for _ in range(ctx.num_clients)]

    def broadcast(self, ctx, server, cid, rnd):
        return RoundMessage("prototypes", {"prototypes": server})

    def client_update(self, ctx, cid, state: ProtoState, message, data: ClientDataset, rng, rnd):
        global_protos = message.payload["prototypes"]
        model, loss = train_epochs(
            state.model,
            data.train_x,
            data.train_y,
            epochs=ctx.local_epochs,
            batch_size=ctx.batch_size,
            lr=ctx.local_lr,
            rng=rng,
            loss_grad=lambda p, x, y: fedproto_loss_and_grad(p, x, y, global_protos, state.lam),
        )
        protos, counts = class_means(body_forward(model, data.train_x)[0], data.train_y, ctx.num_classes)
        new_state = replace(state, model=model, local_prototypes=protos, counts=counts)
        return ClientResult(new_state, RoundMessage("prototypes", {"prototypes": protos, "counts": counts}, data.n_train), loss)

    def aggregate(self, ctx, server, uploads, states, rnd):
        pairs = {cid: (m.payload["prototypes"], m.payload["counts"]) for cid, m in uploads.items()}
        global_protos = aggregate_prototypes(pairs, server)
        return global_protos, [replace(st, global_prototypes=global_protos) for st in states]

    def personalize(self, ctx, server, cid, state: ProtoState, data, rng):
        model = state.model
        return Personalized(lambda x: predict(model, x), model)
