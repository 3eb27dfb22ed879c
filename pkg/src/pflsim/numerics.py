"""Two-part MLP (body + head) with hand-written backprop, plus small numeric helpers.

Tensors are plain ``float64`` numpy arrays. Weight matrices are stored as
``[out_dim, in_dim]`` so a layer computes ``x @ W.T + b``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, LabelError, NonFiniteError

Layer = tuple[np.ndarray, np.ndarray]

ACTIVATIONS = ("relu", "linear")


def derive_rng(seed: int, stream: int) -> np.random.Generator:
    """Independent generator for ``(seed, stream)``; same pair, same sequence."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream),))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class ModelParams:
    """Body layers followed by a linear head.

    The activation is applied after every body layer, so ``features`` are the
    activated output of the last body layer.
    """

    body: tuple[Layer, ...]
    head: Layer
    activation: str = "relu"

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        prev = None
        for idx, (w, b) in enumerate(self.body):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise DimensionError(f"body layer {idx}: weight {w.shape} / bias {b.shape}")
            if prev is not None and w.shape[1] != prev:
                raise DimensionError(
                    f"body layer {idx}: expects input dim {w.shape[1]}, previous layer gives {prev}"
                )
            prev = w.shape[0]
        hw, hb = self.head
        if hw.ndim != 2 or hb.shape != (hw.shape[0],):
            raise DimensionError(f"head: weight {hw.shape} / bias {hb.shape}")
        if prev is not None and hw.shape[1] != prev:
            raise DimensionError(f"head: expects feature dim {hw.shape[1]}, body gives {prev}")

    @property
    def input_dim(self) -> int:
        return (self.body[0][0] if self.body else self.head[0]).shape[1]

    @property
    def feature_dim(self) -> int:
        return self.head[0].shape[1]

    @property
    def num_classes(self) -> int:
        return self.head[0].shape[0]

    def layers(self) -> list[Layer]:
        """All layers bottom-up, head last."""
        return [*self.body, self.head]

    def arrays(self) -> list[np.ndarray]:
        return [a for layer in self.layers() for a in layer]

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ModelParams":
        return ModelParams(
            body=tuple((fn(w), fn(b)) for w, b in self.body),
            head=(fn(self.head[0]), fn(self.head[1])),
            activation=self.activation,
        )

    def zip_map(self, other: "ModelParams", fn: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> "ModelParams":
        check_congruent(self, other)
        return ModelParams(
            body=tuple((fn(w, ow), fn(b, ob)) for (w, b), (ow, ob) in zip(self.body, other.body)),
            head=(fn(self.head[0], other.head[0]), fn(self.head[1], other.head[1])),
            activation=self.activation,
        )

    def with_head(self, head: Layer) -> "ModelParams":
        return ModelParams(body=self.body, head=head, activation=self.activation)

    def with_body(self, body: Sequence[Layer]) -> "ModelParams":
        return ModelParams(body=tuple(body), head=self.head, activation=self.activation)

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unflatten(self, flat: np.ndarray) -> "ModelParams":
        out = []
        pos = 0
        for a in self.arrays():
            out.append(np.asarray(flat[pos : pos + a.size], dtype=np.float64).reshape(a.shape))
            pos += a.size
        if pos != flat.size:
            raise DimensionError(f"flat vector has {flat.size} entries, model has {pos}")
        it = iter(out)
        body = tuple((next(it), next(it)) for _ in self.body)
        return ModelParams(body=body, head=(next(it), next(it)), activation=self.activation)

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())


# Gradients share the parameter container.
GradientBundle = ModelParams


def check_congruent(a: ModelParams, b: ModelParams) -> None:
    la, lb = a.layers(), b.layers()
    if len(la) != len(lb):
        raise DimensionError(f"layer count {len(la)} != {len(lb)}")
    for idx, ((wa, ba), (wb, bb)) in enumerate(zip(la, lb)):
        if wa.shape != wb.shape or ba.shape != bb.shape:
            name = "head" if idx == len(la) - 1 else f"body layer {idx}"
            raise DimensionError(f"{name}: {wa.shape} vs {wb.shape}")


def params_hash(params: ModelParams | Layer | Iterable) -> str:
    """sha256 over shapes and bytes of every array, in order; nested layer tuples are flattened."""
    arrays: list[np.ndarray] = []
    stack = [params]
    while stack:
        item = stack.pop()
        if isinstance(item, ModelParams):
            stack.extend(reversed(item.arrays()))
        elif isinstance(item, np.ndarray):
            arrays.append(item)
        else:
            stack.extend(reversed(list(item)))
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a, dtype=np.float64)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def glorot_layer(rng: np.random.Generator, fan_in: int, fan_out: int) -> Layer:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
    return w, np.zeros(fan_out)


def init_params(
    input_dim: int,
    hidden_dims: Sequence[int],
    num_classes: int,
    rng: np.random.Generator,
    activation: str = "relu",
) -> ModelParams:
    dims = [input_dim, *hidden_dims]
    body = tuple(glorot_layer(rng, dims[i], dims[i + 1]) for i in range(len(hidden_dims)))
    head = glorot_layer(rng, dims[-1], num_classes)
    return ModelParams(body=body, head=head, activation=activation)


def zeros_like(params: ModelParams) -> ModelParams:
    return params.map(np.zeros_like)


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    return np.maximum(z, 0.0) if activation == "relu" else z


@dataclass(frozen=True)
class ForwardCache:
    inputs: tuple[np.ndarray, ...]  # input to each body layer
    preacts: tuple[np.ndarray, ...]  # pre-activation of each body layer
    features: np.ndarray


def _as_batch(params: ModelParams, batch: np.ndarray) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        target = "body layer 0" if params.body else "head"
        raise DimensionError(f"{target}: expects input dim {params.input_dim}, got batch shape {x.shape}")
    return x


def body_forward(params: ModelParams, batch: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    x = _as_batch(params, batch)
    inputs, preacts = [], []
    h = x
    for w, b in params.body:
        inputs.append(h)
        z = h @ w.T + b
        preacts.append(z)
        h = _activate(z, params.activation)
    return h, ForwardCache(tuple(inputs), tuple(preacts), h)


def head_forward(head: Layer, features: np.ndarray) -> np.ndarray:
    return features @ head[0].T + head[1]


def forward(params: ModelParams, batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(features, logits)`` for a batch of row vectors."""
    features, _ = body_forward(params, batch)
    return features, head_forward(params.head, features)


def predict(params: ModelParams, batch: np.ndarray) -> np.ndarray:
    return np.argmax(forward(params, batch)[1], axis=1)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _check_labels(labels: np.ndarray, num_classes: int, n: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (n,):
        raise DimensionError(f"labels shape {y.shape} does not match batch size {n}")
    bad = np.flatnonzero((y < 0) | (y >= num_classes))
    if bad.size:
        i = int(bad[0])
        raise LabelError(f"label {int(y[i])} at index {i} outside [0, {num_classes})")
    return y.astype(np.int64)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    n, c = logits.shape
    if n == 0:
        raise DimensionError("empty batch")
    y = _check_labels(labels, c, n)
    logp = log_softmax(logits)
    loss = -float(logp[np.arange(n), y].mean())
    d = np.exp(logp)
    d[np.arange(n), y] -= 1.0
    return loss, d / n


def backward(
    params: ModelParams,
    cache: ForwardCache,
    d_logits: np.ndarray | None,
    d_features: np.ndarray | None = None,
    *,
    head_grad: bool = True,
    body_grad: bool = True,
) -> ModelParams:
    """Backpropagate upstream gradients on logits and/or features.

    Disabled parts come back as zero arrays so the result stays congruent.
    """
    feats = cache.features
    hw, hb = params.head
    if d_logits is not None and head_grad:
        g_head = (d_logits.T @ feats, d_logits.sum(axis=0))
    else:
        g_head = (np.zeros_like(hw), np.zeros_like(hb))
    if not body_grad or not params.body:
        return ModelParams(
            body=tuple((np.zeros_like(w), np.zeros_like(b)) for w, b in params.body),
            head=g_head,
            activation=params.activation,
        )
    dh = np.zeros_like(feats)
    if d_logits is not None:
        dh = dh + d_logits @ hw
    if d_features is not None:
        dh = dh + d_features
    grads: list[Layer] = []
    for idx in range(len(params.body) - 1, -1, -1):
        w, _ = params.body[idx]
        dz = dh * (cache.preacts[idx] > 0) if params.activation == "relu" else dh
        grads.append((dz.T @ cache.inputs[idx], dz.sum(axis=0)))
        if idx:
            dh = dz @ w
    grads.reverse()
    return ModelParams(body=tuple(grads), head=g_head, activation=params.activation)


def loss_and_grad(params: ModelParams, batch: np.ndarray, labels: np.ndarray) -> tuple[float, ModelParams]:
    """Mean softmax cross-entropy over the batch and its gradient."""
    feats, cache = body_forward(params, batch)
    logits = head_forward(params.head, feats)
    loss, d_logits = cross_entropy(logits, labels)
    if not np.isfinite(loss):
        raise NonFiniteError("cross-entropy is not finite")
    return loss, backward(params, cache, d_logits)


def sgd_step(params: ModelParams, grad: ModelParams, lr: float) -> ModelParams:
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    return params.zip_map(grad, lambda p, g: p - lr * g)


def weighted_sum(models: Sequence[ModelParams], weights: Sequence[float]) -> ModelParams:
    """Sum of ``w_i * model_i`` folded in list order."""
    if not models:
        raise ValueError("weighted_sum of an empty list")
    if len(models) != len(weights):
        raise DimensionError(f"{len(models)} models but {len(weights)} weights")
    for m in models[1:]:
        check_congruent(models[0], m)
    per_model = [m.arrays() for m in models]
    out = []
    for k in range(len(per_model[0])):
        acc = np.zeros_like(per_model[0][k])
        for arrs, w in zip(per_model, weights):
            acc += float(w) * arrs[k]
        out.append(acc)
    it = iter(out)
    body = tuple((next(it), next(it)) for _ in models[0].body)
    return ModelParams(body=body, head=(next(it), next(it)), activation=models[0].activation)


def inner(a: ModelParams, b: ModelParams) -> float:
    check_congruent(a, b)
    return float(sum(np.vdot(x, y) for x, y in zip(a.arrays(), b.arrays())))


def clip01(t: np.ndarray) -> np.ndarray:
    return np.minimum(1.0, np.maximum(0.0, np.asarray(t, dtype=np.float64)))


def simplex_project(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-and-threshold)."""
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("simplex_project of an empty vector")
    if not np.all(np.isfinite(v)):
        raise NonFiniteError("simplex_project input is not finite")
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ks = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / ks > 0)[0][-1]
    theta = css[rho] / (rho + 1)
    w = np.maximum(v - theta, 0.0)
    # absorb rounding so the sum is exactly on the simplex to ~1 ulp
    return w / w.sum()


def iterate_minibatches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled index batches covering ``range(n)``; ceil(n / batch_size) of them."""
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]
