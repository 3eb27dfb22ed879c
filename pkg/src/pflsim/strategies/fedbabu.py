"""FedBABU: federate the body under a frozen random head; fine-tune the head only at evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..data import ClientDataset
from ..errors import CapacityError
from ..numerics import Layer, ModelParams, body_forward, cross_entropy, head_forward, iterate_minibatches, predict
from .base import ClientResult, Personalized, RoundMessage, RunContext, Strategy, train_epochs, weighted_average


@dataclass(frozen=True)
class BabuParams:
    finetune_epochs: int = 5
    finetune_lr: float | None = None  # None -> local_lr


@dataclass(frozen=True)
class BabuState:
    frozen_head: Layer
    fine_tune_epochs: int
    personalized_head: Layer | None = None  # set on the final ClientState after fine-tuning


def iterations_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def fedbabu_finetune(
    params: ModelParams,
    data: ClientDataset,
    epochs: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
) -> ModelParams:
    """Head-only SGD on the client's train split; the body is never touched."""
    if data.n_train == 0:
        raise CapacityError("cannot fine-tune on an empty train split")
    if epochs == 0:
        return params
    feats, _ = body_forward(params, data.train_x)
    w, b = params.head
    for _ in range(epochs):
        for idx in iterate_minibatches(data.n_train, batch_size, rng):
            f = feats[idx]
            _, d_logits = cross_entropy(head_forward((w, b), f), data.train_y[idx])
            w = w - lr * (d_logits.T @ f)
            b = b - lr * d_logits.sum(axis=0)
    return params.with_head((w, b))


class FedBabu(Strategy):
    name = "fedbabu"
    state_type = BabuState

    def __init__(self, params: BabuParams | None = None):
        self.params = params or BabuParams()

    def setup(self, ctx: RunContext):
        model = ctx.initial_model
        return model, [BabuState(model.head, self.params.finetune_epochs) for _ in range(ctx.num_clients)]

    def broadcast(self, ctx, server, cid, rnd):
        return RoundMessage("model", {"params": server})

    def client_update(self, ctx, cid, state: BabuState, message, data, rng, rnd):
        start = message.payload["params"].with_head(state.frozen_head)
        trained, loss = train_epochs(
            start,
            data.train_x,
            data.train_y,
            epochs=ctx.local_epochs,
            batch_size=ctx.batch_size,
            lr=ctx.local_lr,
            rng=rng,
            trainable="body",
        )
        return ClientResult(state, RoundMessage("body", {"body": trained.body}, data.n_train), loss)

    def aggregate(self, ctx, server: ModelParams, uploads, states, rnd):
        bodies = {cid: (server.with_body(m.payload["body"]), m.num_samples) for cid, m in uploads.items()}
        merged = weighted_average(bodies)
        # head stays the initial one, bit for bit
        return server.with_body(merged.body), list(states)

    def personalize(self, ctx, server: ModelParams, cid, state: BabuState, data, rng):
        lr = ctx.local_lr if self.params.finetune_lr is None else self.params.finetune_lr
        tuned = fedbabu_finetune(
            server.with_head(state.frozen_head), data, state.fine_tune_epochs, lr, ctx.batch_size, rng
        )
        return Personalized(lambda x: predict(tuned, x), tuned)

    def global_model(self, ctx, server, states):
        return server
