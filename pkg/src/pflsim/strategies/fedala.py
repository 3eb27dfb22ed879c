"""FedALA: element-wise adaptive blending of the global model into the local one."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..data import ClientDataset
from ..errors import ConfigError
from ..numerics import Layer, ModelParams, clip01, loss_and_grad, predict
from .base import ClientResult, Personalized, RoundMessage, RunContext, Strategy, train_epochs, weighted_average


@dataclass(frozen=True)
class AlaParams:
    ala_lr: float | None = None  # None -> local_lr
    data_percent: float = 80.0  # s
    layers: int = 1  # p, counted from the head downwards
    tol: float = 1e-4
    window: int = 5
    max_steps: int = 50


@dataclass(frozen=True)
class AlaState:
    local: ModelParams  # previous local model
    weights: tuple[Layer, ...]  # blend weights for the top `layers` layers, bottom-up
    ala_lr: float
    data_percent: float
    layers: int
    first_round_done: bool = False
    participated: bool = False


def blend(local: ModelParams, global_params: ModelParams, weights: tuple[Layer, ...]) -> ModelParams:
    """local + (global - local) * [1; W]: lower layers take the global value outright.

    Evaluated as ``global * W + local * (1 - W)`` so W = 1 and W = 0 reproduce
    the global and local values bit for bit.
    """
    g_layers = global_params.layers()
    l_layers = local.layers()
    p = len(weights)
    out = list(g_layers[: len(g_layers) - p])
    for (lw, lb), (gw, gb), (ww, wb) in zip(l_layers[-p:], g_layers[-p:], weights):
        out.append((gw * ww + lw * (1.0 - ww), gb * wb + lb * (1.0 - wb)))
    return ModelParams(body=tuple(out[:-1]), head=out[-1], activation=global_params.activation)


def blend_weight_grad(
    local: ModelParams, global_params: ModelParams, weights: tuple[Layer, ...], x: np.ndarray, y: np.ndarray
) -> tuple[float, tuple[Layer, ...]]:
    """Loss of the blended model and its gradient w.r.t. the blend weights."""
    blended = blend(local, global_params, weights)
    loss, g = loss_and_grad(blended, x, y)
    p = len(weights)
    grads = []
    for (gw, gb), (lw, lb), (Gw, Gb) in zip(g.layers()[-p:], local.layers()[-p:], global_params.layers()[-p:]):
        grads.append((gw * (Gw - lw), gb * (Gb - lb)))
    return loss, tuple(grads)


def train_blend_weights(
    state: AlaState,
    global_params: ModelParams,
    x: np.ndarray,
    y: np.ndarray,
    *,
    until_converged: bool,
    tol: float,
    window: int,
    max_steps: int,
) -> tuple[tuple[Layer, ...], int]:
    """Gradient steps on W followed by clipping into [0, 1].

    One step, or (``until_converged``) until the loss improves by less than
    ``tol`` over ``window`` steps, capped at ``max_steps``.
    """
    weights = state.weights
    losses: list[float] = []
    steps = 0
    while True:
        loss, grads = blend_weight_grad(state.local, global_params, weights, x, y)
        weights = tuple(
            (clip01(ww - state.ala_lr * gw), clip01(wb - state.ala_lr * gb)) for (ww, wb), (gw, gb) in zip(weights, grads)
        )
        losses.append(loss)
        steps += 1
        if not until_converged or steps >= max_steps:
            break
        if len(losses) > window and losses[-window - 1] - losses[-1] < tol:
            break
    return weights, steps


def fedala_local_init(
    state: AlaState,
    global_params: ModelParams,
    data: ClientDataset,
    rng: np.random.Generator,
    params: AlaParams | None = None,
) -> tuple[AlaState, ModelParams]:
    """Adapt the blend weights on an s% subsample and return the blended starting model."""
    params = params or AlaParams()
    if not state.participated:
        # local model is still the initial one: W = 1 makes the blend the global model
        return replace(state, participated=True), blend(state.local, global_params, state.weights)
    n = data.n_train
    m = max(1, int(state.data_percent / 100.0 * n))
    idx = np.sort(rng.choice(n, size=min(m, n), replace=False))
    weights, _ = train_blend_weights(
        state,
        global_params,
        data.train_x[idx],
        data.train_y[idx],
        until_converged=not state.first_round_done,
        tol=params.tol,
        window=params.window,
        max_steps=params.max_steps,
    )
    new_state = replace(state, weights=weights, first_round_done=True)
    return new_state, blend(state.local, global_params, weights)


class FedAla(Strategy):
    name = "fedala"
    state_type = AlaState

    def __init__(self, params: AlaParams | None = None):
        self.params = params or AlaParams()

    def setup(self, ctx: RunContext):
        model = ctx.initial_model
        p = self.params.layers
        if not 1 <= p <= len(model.layers()):
            raise ConfigError(f"fedala layers must be in [1, {len(model.layers())}], got {p}")
        weights = tuple((np.ones_like(w), np.ones_like(b)) for w, b in model.layers()[-p:])
        lr = ctx.local_lr if self.params.ala_lr is None else self.params.ala_lr
        states = [AlaState(model, weights, lr, self.params.data_percent, p) for _ in range(ctx.num_clients)]
        return model, states

    def broadcast(self, ctx, server, cid, rnd):
        return RoundMessage("model", {"params": server})

    def client_update(self, ctx, cid, state: AlaState, message, data, rng, rnd):
        global_params = message.payload["params"]
        state, start = fedala_local_init(state, global_params, data, rng, self.params)
        trained, loss = train_epochs(
            start, data.train_x, data.train_y, epochs=ctx.local_epochs, batch_size=ctx.batch_size, lr=ctx.local_lr, rng=rng
        )
        state = replace(state, local=trained)
        return ClientResult(state, RoundMessage("model", {"params": trained}, data.n_train), loss)

    def aggregate(self, ctx, server, uploads, states, rnd):
        merged = weighted_average({cid: (m.payload["params"], m.num_samples) for cid, m in uploads.items()})
        return merged, list(states)

    def personalize(self, ctx, server, cid, state: AlaState, data, rng):
        model = state.local
        return Personalized(lambda x: predict(model, x), model)

    def global_model(self, ctx, server, states):
        return server
