"""APPLE: each client mixes every client's core model with its own learned DR vector."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Literal, Mapping, Sequence

import numpy as np

from ..data import ClientDataset
from ..errors import ConfigError
from ..numerics import ModelParams, inner, iterate_minibatches, loss_and_grad, predict, weighted_sum
from .base import ClientResult, Personalized, RoundMessage, RunContext, Strategy, mean_or_nan


@dataclass(frozen=True)
class AppleParams:
    eta1: float | None = None  # core-model lr; None -> local_lr
    eta2: float = 0.01  # DR-vector lr
    mu: float = 0.1
    decay_fraction: float = 0.3  # L; inf keeps lambda at 1
    dr_init: Literal["proportional", "self"] = "proportional"


@dataclass(frozen=True)
class AppleState:
    dr: np.ndarray  # p_i over all N clients
    prox_center: np.ndarray  # p_0
    core: ModelParams  # this client's core model
    eta1: float
    eta2: float
    mu: float
    decay_fraction: float


def proximal_weight(rnd: int, rounds: int, decay_fraction: float) -> float:
    """lambda(r): cosine decay from 1 to 0 over the first ``decay_fraction * rounds`` rounds."""
    horizon = decay_fraction * rounds
    frac = 1.0 if horizon <= 0 else min(rnd / horizon, 1.0)
    return (math.cos(math.pi * frac) + 1.0) / 2.0


def apple_objective_and_grad(
    cores: Sequence[ModelParams],
    cid: int,
    dr: np.ndarray,
    prox_center: np.ndarray,
    lam_mu: float,
    x: np.ndarray,
    y: np.ndarray,
) -> tuple[float, ModelParams, np.ndarray]:
    """F_i = CE(sum_j p_j w_j) + lam_mu/2 * ||p - p0||^2 and its gradients.

    Returns ``(F, dF/d core_cid, dF/d p)``.
    """
    if len(cores) != dr.size or dr.size != prox_center.size:
        raise ConfigError(f"{len(cores)} core models, DR vector of length {dr.size}, prox-center {prox_center.size}")
    personal = weighted_sum(cores, dr)
    risk, g = loss_and_grad(personal, x, y)
    gap = dr - prox_center
    value = risk + 0.5 * lam_mu * float(gap @ gap)
    g_core = g.map(lambda a: dr[cid] * a)
    g_dr = np.array([inner(g, w) for w in cores]) + lam_mu * gap
    return value, g_core, g_dr


class Apple(Strategy):
    name = "apple"
    state_type = AppleState

    def __init__(self, params: AppleParams | None = None):
        self.params = params or AppleParams()

    def setup(self, ctx: RunContext):
        n = np.asarray(ctx.train_counts, dtype=np.float64)
        p0 = n / n.sum()
        eta1 = ctx.local_lr if self.params.eta1 is None else self.params.eta1
        states = []
        for cid in range(ctx.num_clients):
            dr = p0.copy() if self.params.dr_init == "proportional" else np.eye(ctx.num_clients)[cid]
            states.append(
                AppleState(dr, p0, ctx.initial_model, eta1, self.params.eta2, self.params.mu, self.params.decay_fraction)
            )
        return tuple(ctx.initial_model for _ in range(ctx.num_clients)), states

    def broadcast(self, ctx, server, cid, rnd):
        return RoundMessage("core_models", {"cores": server})

    def client_update(self, ctx, cid, state: AppleState, message, data: ClientDataset, rng, rnd):
        cores = list(message.payload["cores"])
        if len(cores) != state.dr.size:
            raise ConfigError(f"client {cid}: {len(cores)} core models for a DR vector of length {state.dr.size}")
        lam_mu = proximal_weight(rnd, ctx.rounds, state.decay_fraction) * state.mu
        dr = state.dr
        losses = []
        for _ in range(ctx.local_epochs):
            for idx in iterate_minibatches(data.n_train, ctx.batch_size, rng):
                value, g_core, g_dr = apple_objective_and_grad(
                    cores, cid, dr, state.prox_center, lam_mu, data.train_x[idx], data.train_y[idx]
                )
                cores[cid] = cores[cid].zip_map(g_core, lambda w, g: w - state.eta1 * g)
                dr = dr - state.eta2 * g_dr
                losses.append(value)
        new_state = replace(state, dr=dr, core=cores[cid])
        upload = RoundMessage("model", {"params": cores[cid]}, data.n_train)
        return ClientResult(new_state, upload, mean_or_nan(losses))

    def aggregate(self, ctx, server, uploads: Mapping[int, RoundMessage], states, rnd):
        cores = list(server)
        for cid in sorted(uploads):
            cores[cid] = uploads[cid].payload["params"]
        return tuple(cores), list(states)

    def personalize(self, ctx, server, cid, state: AppleState, data, rng):
        model = weighted_sum(list(server), state.dr)
        return Personalized(lambda x: predict(model, x), model)

    def global_model(self, ctx, server, states):
        return weighted_sum(list(server), states[0].prox_center)
