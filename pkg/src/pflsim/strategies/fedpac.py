"""FedPAC: feature alignment to global centroids plus simplex-weighted classifier mixing.

The mixing weights minimise a quadratic surrogate risk built from the
uploaded per-class feature means and variances: the Brier score of the
alpha-weighted mixture of each classifier's softmax response at client i's
class means, plus a delta-method variance term

    R_i(a) = sum_k (n_ik / n_i) * ( ||sum_j a_j P_jk - e_k||^2
                                    + sum_d V_ik[d] ||sum_j a_j J_jk W_j[:, d]||^2 )

where P_jk = softmax(W_j mu_ik + b_j) and J_jk is the softmax Jacobian there.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from ..data import ClientDataset
from ..numerics import Layer, ModelParams, backward, body_forward, cross_entropy, head_forward, predict, simplex_project, softmax
from .base import (
    ClientResult,
    Personalized,
    RoundMessage,
    RunContext,
    Strategy,
    aggregate_prototypes,
    alignment_penalty,
    class_means,
    train_epochs,
    weighted_average,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PacParams:
    lam: float = 1.0
    eta_f: float | None = None  # extractor lr; None -> local_lr
    eta_g: float | None = None  # classifier lr; None -> local_lr
    alpha_step: float = 0.1
    alpha_iters: int = 500


@dataclass(frozen=True)
class FeatureStats:
    means: dict[int, np.ndarray]  # mu_i per class
    variances: dict[int, np.ndarray]  # V_i per class, per feature dimension
    counts: dict[int, int]  # n_{i,k}


@dataclass(frozen=True)
class PacState:
    head: Layer  # personalised classifier phi_i
    lam: float
    eta_f: float
    eta_g: float
    centroids: dict[int, np.ndarray] | None = None
    stats: FeatureStats | None = None
    alpha: np.ndarray | None = None


@dataclass(frozen=True)
class AlphaSolution:
    alpha: np.ndarray
    objective: float
    iterations: int
    converged: bool


def feature_statistics(features: np.ndarray, labels: np.ndarray, num_classes: int) -> FeatureStats:
    means, counts = class_means(features, labels, num_classes)
    variances = {k: features[labels == k].var(axis=0) for k in means}
    return FeatureStats(means, variances, counts)


def fedpac_loss_and_grad(
    params: ModelParams,
    x: np.ndarray,
    y: np.ndarray,
    centroids: Mapping[int, np.ndarray] | None,
    lam: float,
) -> tuple[float, ModelParams]:
    """Cross-entropy + lam * sum_k (n_k / n) ||batch centroid_k - c_k||^2."""
    feats, cache = body_forward(params, x)
    ce, d_logits = cross_entropy(head_forward(params.head, feats), y)
    if not centroids or lam == 0:
        return ce, backward(params, cache, d_logits)
    align, d_feats = alignment_penalty(feats, y, centroids, weighting="count")
    return ce + lam * align, backward(params, cache, d_logits, lam * d_feats)


def risk_quadratic(stats: FeatureStats, heads: Sequence[Layer], num_classes: int) -> tuple[np.ndarray, np.ndarray, float]:
    """``(A, b, c)`` with R(a) = a^T A a - 2 b^T a + c."""
    m = len(heads)
    total = sum(stats.counts.values())
    a_mat = np.zeros((m, m))
    b_vec = np.zeros(m)
    const = 0.0
    for k in sorted(stats.means):
        pi = stats.counts[k] / total
        mu = stats.means[k]
        probs = np.stack([softmax(w @ mu + b) for w, b in heads])  # [m, C]
        a_mat += pi * probs @ probs.T
        b_vec += pi * probs[:, k]
        const += pi
        # sensitivities J_j W_j: [m, C, F]
        sens = np.stack([(np.diag(p) - np.outer(p, p)) @ w for p, (w, _) in zip(probs, heads)])
        a_mat += pi * np.einsum("acd,bcd,d->ab", sens, sens, stats.variances[k])
    return 0.5 * (a_mat + a_mat.T), b_vec, const


def quadratic_value(a_mat: np.ndarray, b_vec: np.ndarray, const: float, alpha: np.ndarray) -> float:
    return float(alpha @ a_mat @ alpha - 2.0 * b_vec @ alpha + const)


def fedpac_solve_alpha(
    a_mat: np.ndarray,
    b_vec: np.ndarray,
    const: float = 0.0,
    *,
    step: float = 0.1,
    max_iter: int = 500,
    tol: float = 1e-9,
) -> AlphaSolution:
    """Projected gradient descent on the simplex, started from the uniform vector.

    The step is capped at 1/L (L the gradient's Lipschitz constant) so the
    iteration is monotone whatever the scale of A. Stops once the projected
    gradient step moves no coordinate by more than ``tol``.
    """
    m = b_vec.size
    alpha = np.full(m, 1.0 / m)
    if m == 1:
        return AlphaSolution(alpha, quadratic_value(a_mat, b_vec, const, alpha), 0, True)
    lip = 2.0 * float(np.linalg.eigvalsh(a_mat).max(initial=0.0))
    eff = step if lip <= 0 else min(step, 1.0 / lip)
    best, best_val = alpha, quadratic_value(a_mat, b_vec, const, alpha)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        grad = 2.0 * (a_mat @ alpha - b_vec)
        nxt = simplex_project(alpha - eff * grad)
        val = quadratic_value(a_mat, b_vec, const, nxt)
        if val < best_val:
            best, best_val = nxt, val
        moved = float(np.abs(nxt - alpha).max())
        alpha = nxt
        if moved < tol:
            converged = True
            break
    if not converged:
        log.debug("classifier-mixing solver hit %d iterations; returning best iterate", max_iter)
    return AlphaSolution(best, best_val, it, converged)


def mix_heads(heads: Sequence[Layer], alpha: np.ndarray) -> Layer:
    w = np.zeros_like(heads[0][0])
    b = np.zeros_like(heads[0][1])
    for a, (hw, hb) in zip(alpha, heads):
        w += a * hw
        b += a * hb
    return w, b


@dataclass(frozen=True)
class PacServer:
    body: tuple[Layer, ...]
    activation: str
    centroids: dict[int, np.ndarray]
    heads: tuple[Layer, ...]  # personalised classifier per client

    def client_model(self, cid: int) -> ModelParams:
        return ModelParams(self.body, self.heads[cid], self.activation)


class FedPac(Strategy):
    name = "fedpac"
    state_type = PacState

    def __init__(self, params: PacParams | None = None):
        self.params = params or PacParams()

    def setup(self, ctx: RunContext):
        m = ctx.initial_model
        eta_f = ctx.local_lr if self.params.eta_f is None else self.params.eta_f
        eta_g = ctx.local_lr if self.params.eta_g is None else self.params.eta_g
        server = PacServer(m.body, m.activation, {}, tuple(m.head for _ in range(ctx.num_clients)))
        return server, [PacState(m.head, self.params.lam, eta_f, eta_g) for _ in range(ctx.num_clients)]

    def broadcast(self, ctx, server: PacServer, cid, rnd):
        return RoundMessage("centroids", {"body": server.body, "centroids": server.centroids})

    def client_update(self, ctx, cid, state: PacState, message, data: ClientDataset, rng, rnd):
        params = ModelParams(message.payload["body"], state.head, ctx.initial_model.activation)
        centroids = message.payload["centroids"]
        feats, _ = body_forward(params, data.train_x)
        stats = feature_statistics(feats, data.train_y, ctx.num_classes)
        params, _ = train_epochs(
            params, data.train_x, data.train_y, epochs=1, batch_size=ctx.batch_size, lr=state.eta_g, rng=rng, trainable="head"
        )
        params, loss = train_epochs(
            params,
            data.train_x,
            data.train_y,
            epochs=ctx.local_epochs,
            batch_size=ctx.batch_size,
            lr=state.eta_f,
            rng=rng,
            trainable="body",
            loss_grad=lambda p, x, y: fedpac_loss_and_grad(p, x, y, centroids, state.lam),
        )
        local_centroids, counts = class_means(body_forward(params, data.train_x)[0], data.train_y, ctx.num_classes)
        payload = {"body": params.body, "head": params.head, "centroids": local_centroids, "counts": counts, "stats": stats}
        new_state = replace(state, head=params.head, centroids=local_centroids, stats=stats)
        return ClientResult(new_state, RoundMessage("pac", payload, data.n_train), loss)

    def aggregate(self, ctx, server: PacServer, uploads, states, rnd):
        act = server.activation
        models = {
            cid: (ModelParams(m.payload["body"], m.payload["head"], act), m.num_samples) for cid, m in uploads.items()
        }
        body = weighted_average(models).body
        centroids = aggregate_prototypes(
            {cid: (m.payload["centroids"], m.payload["counts"]) for cid, m in uploads.items()}, server.centroids
        )
        selected = sorted(uploads)
        local_heads = [uploads[j].payload["head"] for j in selected]
        heads = list(server.heads)
        new_states = list(states)
        for cid in selected:
            a_mat, b_vec, const = risk_quadratic(uploads[cid].payload["stats"], local_heads, ctx.num_classes)
            sol = fedpac_solve_alpha(a_mat, b_vec, const, step=self.params.alpha_step, max_iter=self.params.alpha_iters)
            heads[cid] = mix_heads(local_heads, sol.alpha)
            new_states[cid] = replace(states[cid], head=heads[cid], alpha=sol.alpha)
        return PacServer(body, act, centroids, tuple(heads)), new_states

    def personalize(self, ctx, server: PacServer, cid, state, data, rng):
        model = server.client_model(cid)
        return Personalized(lambda x: predict(model, x), model)

    def global_model(self, ctx, server: PacServer, states):
        n = np.asarray(ctx.train_counts, dtype=np.float64)
        head = mix_heads(server.heads, n / n.sum())
        return ModelParams(server.body, head, server.activation)
