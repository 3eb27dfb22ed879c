"""FedGC: shared body, per-client class matrices, server-side spread-out correction."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..numerics import Layer, ModelParams, predict
from .base import ClientResult, Personalized, RoundMessage, RunContext, Strategy, train_epochs, weighted_average

_EPS = 1e-12


@dataclass(frozen=True)
class GcParams:
    lam: float = 0.1
    correction: bool = True


@dataclass(frozen=True)
class GcState:
    class_matrix: np.ndarray  # W_k, [num_classes, feature_dim]
    bias: np.ndarray  # head bias, kept per client
    lam: float


def regularizer_and_grad(stacked: np.ndarray) -> tuple[float, np.ndarray]:
    """Reg = sum over client pairs a<b and classes j of cos(w_aj, w_bj)^2, and dReg/dW.

    ``stacked`` is ``[num_clients, num_classes, feature_dim]``. Zero rows
    contribute nothing.
    """
    w = np.asarray(stacked, dtype=np.float64)
    norms = np.linalg.norm(w, axis=2, keepdims=True)
    safe = np.where(norms > _EPS, norms, 1.0)
    u = np.where(norms > _EPS, w / safe, 0.0)
    # per class: Gram matrix across clients
    gram = np.einsum("ajf,bjf->jab", u, u)
    k = w.shape[0]
    off = gram * (1.0 - np.eye(k))[None, :, :]
    reg = 0.5 * float((off**2).sum())
    g_u = 2.0 * np.einsum("jab,bjf->ajf", off, u)
    radial = (g_u * u).sum(axis=2, keepdims=True)
    grad = np.where(norms > _EPS, (g_u - radial * u) / safe, 0.0)
    return reg, grad


def fedgc_gradient_correction(stacked: np.ndarray, lam: float, eta: float) -> np.ndarray:
    """W - lam * eta * grad Reg(W)."""
    if lam < 0 or eta <= 0:
        raise ValueError(f"need lam >= 0 and eta > 0, got lam={lam}, eta={eta}")
    stacked = np.asarray(stacked, dtype=np.float64)
    if lam == 0:
        return stacked.copy()
    _, grad = regularizer_and_grad(stacked)
    return stacked - lam * eta * grad


@dataclass(frozen=True)
class GcServer:
    body: tuple[Layer, ...]
    activation: str
    class_matrices: np.ndarray  # [num_clients, num_classes, feature_dim]
    biases: np.ndarray  # [num_clients, num_classes]

    def client_model(self, cid: int) -> ModelParams:
        return ModelParams(self.body, (self.class_matrices[cid], self.biases[cid]), self.activation)


class FedGc(Strategy):
    name = "fedgc"
    state_type = GcState

    def __init__(self, params: GcParams | None = None):
        self.params = params or GcParams()

    def setup(self, ctx: RunContext):
        m = ctx.initial_model
        k = ctx.num_clients
        server = GcServer(
            m.body, m.activation, np.repeat(m.head[0][None], k, axis=0), np.repeat(m.head[1][None], k, axis=0)
        )
        return server, [GcState(m.head[0], m.head[1], self.params.lam) for _ in range(k)]

    def broadcast(self, ctx, server: GcServer, cid, rnd):
        return RoundMessage("model", {"params": server.client_model(cid)})

    def client_update(self, ctx, cid, state, message, data, rng, rnd):
        trained, loss = train_epochs(
            message.payload["params"],
            data.train_x,
            data.train_y,
            epochs=ctx.local_epochs,
            batch_size=ctx.batch_size,
            lr=ctx.local_lr,
            rng=rng,
        )
        return ClientResult(state, RoundMessage("model", {"params": trained}, data.n_train), loss)

    def aggregate(self, ctx, server: GcServer, uploads, states, rnd):
        models = {cid: (m.payload["params"], m.num_samples) for cid, m in uploads.items()}
        body = weighted_average(models).body
        stacked = server.class_matrices.copy()
        biases = server.biases.copy()
        for cid in sorted(uploads):
            stacked[cid] = uploads[cid].payload["params"].head[0]
            biases[cid] = uploads[cid].payload["params"].head[1]
        if self.params.correction:
            stacked = fedgc_gradient_correction(stacked, self.params.lam, ctx.local_lr)
        new_states = [replace(st, class_matrix=stacked[cid], bias=biases[cid]) for cid, st in enumerate(states)]
        return GcServer(body, server.activation, stacked, biases), new_states

    def personalize(self, ctx, server: GcServer, cid, state, data, rng):
        model = server.client_model(cid)
        return Personalized(lambda x: predict(model, x), model)

    def global_model(self, ctx, server: GcServer, states):
        n = np.asarray(ctx.train_counts, dtype=np.float64)
        w = n / n.sum()
        head = (np.tensordot(w, server.class_matrices, axes=1), w @ server.biases)
        return ModelParams(server.body, head, server.activation)
