import itertools

import numpy as np
import pytest

from helpers import blob_config, blob_dataset, blob_plan, run_rounds, small_clients, small_context
from oracles import central_fd, rel_err
from pflsim.numerics import params_hash
from pflsim.runtime import run_experiment
from pflsim.strategies import FedGc, GcParams
from pflsim.strategies.fedgc import fedgc_gradient_correction, regularizer_and_grad


def reg_reference(stacked):
    """Loop definition: sum over client pairs a<b and classes j of cos^2."""
    total = 0.0
    k, c, _ = stacked.shape
    for a, b in itertools.combinations(range(k), 2):
        for j in range(c):
            u, v = stacked[a, j], stacked[b, j]
            total += (u @ v / (np.linalg.norm(u) * np.linalg.norm(v))) ** 2
    return total


def test_lambda_zero_is_identity(rng):
    w = rng.normal(size=(3, 4, 5))
    out = fedgc_gradient_correction(w, 0.0, 0.1)
    assert np.array_equal(out, w) and out is not w


def test_orthogonal_rows_fixed_point():
    w = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])
    reg, grad = regularizer_and_grad(w)
    assert reg == 0.0 and not grad.any()
    assert np.array_equal(fedgc_gradient_correction(w, 1.0, 0.1), w)


def test_identical_rows_reg_one_and_fd():
    w = np.array([[[0.6, 0.8]], [[0.6, 0.8]]])
    reg, grad = regularizer_and_grad(w)
    assert reg == pytest.approx(1.0, abs=1e-15)
    # cos^2 is stationary at identical rows: the gradient vanishes there
    num = central_fd(lambda: regularizer_and_grad(w)[0], w)
    assert np.max(np.abs(grad - num)) < 1e-8
    out = fedgc_gradient_correction(w, 0.5, 0.1)
    assert np.allclose(out, w - 0.05 * num, atol=1e-9)


@pytest.mark.parametrize("seed", range(6))
def test_reg_value_and_gradient(seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(int(rng.integers(2, 5)), 3, 4))
    reg, grad = regularizer_and_grad(w)
    assert reg == pytest.approx(reg_reference(w), rel=1e-12)
    assert rel_err(grad, central_fd(lambda: regularizer_and_grad(w)[0], w)) < 1e-4


def test_zero_rows_are_guarded():
    w = np.zeros((2, 1, 3))
    w[0, 0] = [1.0, 2.0, 2.0]
    reg, grad = regularizer_and_grad(w)
    assert reg == 0.0 and np.isfinite(grad).all()


@pytest.mark.parametrize("seed", range(5))
def test_correction_descends(seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(2, 3, 4))
    before, _ = regularizer_and_grad(w)
    after, _ = regularizer_and_grad(fedgc_gradient_correction(w, 0.1, 0.1))
    assert after <= before


def test_correction_validates_arguments(rng):
    with pytest.raises(ValueError):
        fedgc_gradient_correction(rng.normal(size=(2, 1, 2)), -1.0, 0.1)
    with pytest.raises(ValueError):
        fedgc_gradient_correction(rng.normal(size=(2, 1, 2)), 0.1, 0.0)


def test_lambda_zero_run_equals_disabled_correction():
    ds = blob_dataset()
    a = run_experiment(blob_config("fedgc", 3, params={"lam": 0.0}), blob_plan(ds), ds)
    b = run_experiment(blob_config("fedgc", 3, params={"lam": 0.5, "correction": False}), blob_plan(ds), ds)
    assert np.array_equal(a.server.class_matrices, b.server.class_matrices)
    assert params_hash(a.server.body) == params_hash(b.server.body)


def test_correction_changes_heads():
    ds = blob_dataset()
    a = run_experiment(blob_config("fedgc", 2, params={"lam": 0.0}), blob_plan(ds), ds)
    b = run_experiment(blob_config("fedgc", 2, params={"lam": 1.0}), blob_plan(ds), ds)
    assert not np.array_equal(a.server.class_matrices, b.server.class_matrices)


def test_single_client_body_is_its_upload():
    _, _, clients = small_clients(num_clients=1)
    ctx = small_context(num_clients=1)
    server, states, history = run_rounds(FedGc(GcParams(lam=0.3)), ctx, clients, 2)
    upload = history[-1][2][0].payload["params"]
    assert params_hash(server.body) == params_hash(upload.body)
    # a lone client has no pair to decorrelate from
    assert np.array_equal(server.class_matrices[0], upload.head[0])
    assert np.array_equal(states[0].class_matrix, server.class_matrices[0])
