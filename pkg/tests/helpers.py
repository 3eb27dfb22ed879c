"""Small fixtures shared by the test modules."""

from __future__ import annotations

import numpy as np

from pflsim.data import PARTITION_STREAM, Dataset, build_clients, sort_and_shard, synthetic_blobs
from pflsim.numerics import derive_rng, init_params, params_hash
from pflsim.runtime import CLIENT_STREAM_STRIDE, INIT_STREAM, GlobalConfig, StrategyConfig, run_experiment
from pflsim.strategies import FedBabu, RunContext
from pflsim.strategies.base import train_epochs

# the learning fixture: 4 classes x 150 blobs, 8 clients x 2 shards x 37 samples
BLOB_CLASSES = 4
BLOB_PER_CLASS = 150
BLOB_DIM = 8
BLOB_SPREAD = 0.3
BLOB_CLIENTS = 8
BLOB_SHARD = 37


def blob_dataset(seed: int = 0, spread: float = BLOB_SPREAD) -> Dataset:
    return synthetic_blobs(BLOB_CLASSES, BLOB_PER_CLASS, BLOB_DIM, spread, derive_rng(seed, 7))


def blob_plan(dataset: Dataset, seed: int = 0):
    return sort_and_shard(dataset, BLOB_CLIENTS, 2, BLOB_SHARD, derive_rng(seed, PARTITION_STREAM))


def blob_config(name: str, rounds: int, seed: int = 0, **overrides) -> GlobalConfig:
    kw = dict(
        rounds=rounds,
        num_clients=BLOB_CLIENTS,
        strategy=StrategyConfig(name, overrides.pop("params", {})),
        batch_size=16,
        local_lr=0.1,
        seed=seed,
        hidden_dims=(128,),
    )
    kw.update(overrides)
    return GlobalConfig(**kw)


def small_context(num_clients=3, num_classes=3, input_dim=5, hidden=(6,), seed=0, train_counts=None, **kw) -> RunContext:
    model = init_params(input_dim, hidden, num_classes, derive_rng(seed, 1))
    return RunContext(
        num_clients=num_clients,
        num_classes=num_classes,
        input_dim=input_dim,
        rounds=kw.pop("rounds", 5),
        local_epochs=kw.pop("local_epochs", 1),
        batch_size=kw.pop("batch_size", 8),
        local_lr=kw.pop("local_lr", 0.1),
        initial_model=model,
        train_counts=tuple(train_counts or [10] * num_clients),
    )


def small_clients(num_clients=3, num_classes=3, input_dim=5, per_client=20, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(num_clients * per_client, input_dim))
    y = rng.integers(0, num_classes, size=num_clients * per_client)
    ds = Dataset(x, y, num_classes)
    plan = sort_and_shard(ds, num_clients, 1, per_client, derive_rng(seed, PARTITION_STREAM))
    return ds, plan, build_clients(ds, plan, 0.25, seed)




def payload_arrays(obj):
    """Every ndarray reachable through dicts, lists and tuples, plus any ModelParams found."""
    from pflsim.numerics import ModelParams

    found, models = [], []
    stack = [obj]
    while stack:
        item = stack.pop()
        if isinstance(item, ModelParams):
            models.append(item)
        elif isinstance(item, np.ndarray):
            found.append(item)
        elif isinstance(item, dict):
            stack.extend(item.values())
        elif isinstance(item, (list, tuple)):
            stack.extend(item)
    return found, models


def run_rounds(strategy, ctx, clients, rounds, seed=0):
    """Minimal loop with full participation, for driving a strategy directly."""
    server, states = strategy.setup(ctx)
    history = []
    for rnd in range(1, rounds + 1):
        results = {}
        for cid in range(ctx.num_clients):
            msg = strategy.broadcast(ctx, server, cid, rnd)
            rng = derive_rng(seed, cid * CLIENT_STREAM_STRIDE + rnd)
            results[cid] = strategy.client_update(ctx, cid, states[cid], msg, clients[cid], rng, rnd)
        new_states = [results[c].state for c in range(ctx.num_clients)]
        uploads = {c: results[c].upload for c in range(ctx.num_clients)}
        server, states = strategy.aggregate(ctx, server, uploads, new_states, rnd)
        history.append((server, states, uploads))
    return server, states, history


def head_hash_constant(rounds: int = 20) -> bool:
    ds = blob_dataset()
    cfg = blob_config("fedbabu", rounds, client_fraction=0.5)
    init = init_params(ds.input_dim, cfg.hidden_dims, ds.num_classes, derive_rng(0, INIT_STREAM))
    expected = params_hash(init.head)
    seen = []

    strategy = FedBabu()
    real_update = strategy.client_update

    def watch(ctx, cid, state, message, data, rng, rnd):
        out = real_update(ctx, cid, state, message, data, rng, rnd)
        seen.append(params_hash(message.payload["params"].head))
        seen.append(params_hash(out.state.frozen_head))
        return out

    strategy.client_update = watch
    res = run_experiment(cfg, blob_plan(ds), ds, strategy=strategy, on_round=lambda r: None)
    seen.append(params_hash(res.server.head))
    return len(seen) > 2 * rounds and set(seen) == {expected}


def one_hot_matches_local_sgd(rounds: int = 5, seed: int = 0) -> bool:
    """APPLE with p_i = e_i, mu = 0, eta2 = 0 against independent per-client SGD."""
    ds = blob_dataset(seed)
    plan = blob_plan(ds, seed)
    cfg = blob_config("apple", rounds, seed=seed, params={"dr_init": "self", "mu": 0.0, "eta2": 0.0})
    res = run_experiment(cfg, plan, ds)
    init = init_params(ds.input_dim, cfg.hidden_dims, ds.num_classes, derive_rng(seed, INIT_STREAM))
    for c in res.clients:
        model = init
        for rnd in range(1, rounds + 1):
            rng = derive_rng(seed, c.client_id * CLIENT_STREAM_STRIDE + rnd)
            model, _ = train_epochs(
                model, c.data.train_x, c.data.train_y, epochs=1, batch_size=cfg.batch_size, lr=cfg.local_lr, rng=rng
            )
        if params_hash(model) != params_hash(res.server[c.client_id]):
            return False
        if params_hash(c.personalized) != params_hash(model):
            return False
    return True
