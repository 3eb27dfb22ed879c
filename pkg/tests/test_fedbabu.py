import numpy as np
import pytest

from helpers import blob_config, blob_dataset, blob_plan, head_hash_constant
from pflsim.data import ClientDataset, sort_and_shard, split_client, synthetic_blobs
from pflsim.errors import CapacityError
from pflsim.numerics import derive_rng, init_params, loss_and_grad, params_hash, predict
from pflsim.runtime import INIT_STREAM, GlobalConfig, StrategyConfig, run_experiment
from pflsim.strategies import FedBabu
from pflsim.strategies.fedbabu import fedbabu_finetune, iterations_per_epoch


def test_iterations_per_epoch():
    assert iterations_per_epoch(10, 4) == 3
    assert iterations_per_epoch(8, 4) == 2


def test_head_hash_constant_over_20_rounds():
    assert head_hash_constant(20)


def test_full_batch_single_step_equivalence():
    ds = synthetic_blobs(2, 10, 3, 0.3, derive_rng(0, 0))
    plan = sort_and_shard(ds, 1, 1, 20, derive_rng(0, 1))
    cfg = GlobalConfig(
        rounds=1, num_clients=1, strategy=StrategyConfig("fedbabu"), batch_size=1000, local_lr=0.2, hidden_dims=(4,)
    )
    res = run_experiment(cfg, plan, ds)
    data = res.clients[0].data
    init = init_params(3, (4,), 2, derive_rng(0, INIT_STREAM))
    _, g = loss_and_grad(init, data.train_x, data.train_y)
    for (w, b), (gw, gb), (rw, rb) in zip(init.body, g.body, res.server.body):
        assert np.allclose(rw, w - 0.2 * gw, rtol=0, atol=1e-15)
        assert np.allclose(rb, b - 0.2 * gb, rtol=0, atol=1e-15)


def _client(seed=0):
    ds = synthetic_blobs(2, 15, 4, 0.4, derive_rng(seed, 0))
    return split_client(ds, 0.2, derive_rng(seed, 1))


def test_finetune_zero_epochs_and_body_untouched():
    data = _client()
    m = init_params(4, (6,), 2, derive_rng(0, 2))
    assert fedbabu_finetune(m, data, 0, 0.1, 8, derive_rng(0, 3)) is m
    tuned = fedbabu_finetune(m, data, 3, 0.1, 8, derive_rng(0, 3))
    assert params_hash(tuned.body) == params_hash(m.body)
    assert params_hash(tuned.head) != params_hash(m.head)


def test_finetune_empty_split():
    empty = ClientDataset(np.zeros((0, 4)), np.zeros(0, int), np.zeros((1, 4)), np.zeros(1, int), np.arange(0), np.arange(1))
    with pytest.raises(CapacityError):
        fedbabu_finetune(init_params(4, (6,), 2, derive_rng(0, 2)), empty, 1, 0.1, 4, derive_rng(0, 0))


def test_finetune_beats_frozen_head():
    gains = []
    for seed in range(3):
        ds = synthetic_blobs(2, 100, 4, 0.5, derive_rng(seed, 7))
        plan = sort_and_shard(ds, 2, 2, 50, derive_rng(seed, 1))
        cfg = GlobalConfig(rounds=5, num_clients=2, strategy=StrategyConfig("fedbabu"), seed=seed, batch_size=16)
        res = run_experiment(cfg, plan, ds)
        for c in res.clients:
            frozen = c.personalized.with_head(c.strategy_state.frozen_head)
            acc_frozen = float((predict(frozen, c.data.test_x) == c.data.test_y).mean())
            acc_tuned = float((predict(c.personalized, c.data.test_x) == c.data.test_y).mean())
            gains.append(acc_tuned - acc_frozen)
    assert np.mean(gains) >= 0


def test_uploads_body_only():
    ds = blob_dataset()
    strategy = FedBabu()
    uploads = []
    real = strategy.aggregate

    def grab(ctx, server, up, states, rnd):
        uploads.extend(up.values())
        return real(ctx, server, up, states, rnd)

    strategy.aggregate = grab
    run_experiment(blob_config("fedbabu", 1), blob_plan(ds), ds, strategy=strategy)
    assert all(set(u.payload) == {"body"} for u in uploads)
