import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pflsim.data import (
    Dataset,
    build_clients,
    load_idx,
    load_sign_csv,
    sort_and_shard,
    split_client,
    synthetic_blobs,
    write_idx,
)
from pflsim.errors import CapacityError, ConsistencyError, DataIOError, FormatError, LabelError
from pflsim.numerics import derive_rng


def _idx_pair(tmp_path, images, labels):
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    write_idx(images, labels, ip, lp)
    return ip, lp


def test_idx_hand_built_bytes(tmp_path):
    # bytes written by hand, not via write_idx
    ip, lp = tmp_path / "i", tmp_path / "l"
    pixels = bytes([0, 51, 102, 255, 0, 0, 0, 17])
    ip.write_bytes(struct.pack(">4I", 0x803, 2, 2, 2) + pixels)
    lp.write_bytes(struct.pack(">2I", 0x801, 2) + bytes([7, 3]))
    ds = load_idx(ip, lp)
    assert ds.samples.shape == (2, 4)
    assert ds.samples[0].tolist() == [0.0, 0.2, 0.4, 1.0]
    assert ds.samples[1, 3] == 17 / 255
    assert ds.labels.tolist() == [7, 3] and ds.num_classes == 10


def test_idx_round_trip_and_gzip(tmp_path, rng):
    imgs = rng.integers(0, 256, size=(5, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, 10, size=5).astype(np.uint8)
    ip, lp = _idx_pair(tmp_path, imgs, labels)
    ds = load_idx(ip, lp)
    assert np.array_equal(np.rint(ds.samples * 255).astype(np.uint8), imgs.reshape(5, -1))
    assert ds.input_dim == 784
    gz_i, gz_l = tmp_path / "i.gz", tmp_path / "l.gz"
    gz_i.write_bytes(gzip.compress(ip.read_bytes()))
    gz_l.write_bytes(gzip.compress(lp.read_bytes()))
    assert np.array_equal(load_idx(gz_i, gz_l).samples, ds.samples)


def test_idx_wrong_magic(tmp_path, rng):
    imgs = rng.integers(0, 256, size=(2, 2, 2), dtype=np.uint8)
    ip, lp = _idx_pair(tmp_path, imgs, np.array([0, 1]))
    lp.write_bytes(struct.pack(">2I", 0x803, 2) + bytes([0, 1]))
    with pytest.raises(FormatError):
        load_idx(ip, lp)


def test_idx_truncated(tmp_path, rng):
    imgs = rng.integers(0, 256, size=(3, 2, 2), dtype=np.uint8)
    ip, lp = _idx_pair(tmp_path, imgs, np.array([0, 1, 2]))
    ip.write_bytes(ip.read_bytes()[:-2])
    with pytest.raises(DataIOError):
        load_idx(ip, lp)
    assert issubclass(DataIOError, OSError)


def test_idx_count_mismatch(tmp_path, rng):
    imgs = rng.integers(0, 256, size=(3, 2, 2), dtype=np.uint8)
    ip, lp = _idx_pair(tmp_path, imgs, np.array([0, 1]))
    with pytest.raises(ConsistencyError):
        load_idx(ip, lp)


def _sign_csv(path, rows):
    header = "label," + ",".join(f"pixel{i}" for i in range(1, 785))
    path.write_text("\n".join([header, *rows]) + "\n")
    return path


def test_sign_csv_single_row(tmp_path):
    row = "3," + ",".join(["0"] * 783 + ["255"])
    ds = load_sign_csv(_sign_csv(tmp_path / "s.csv", [row]))
    assert ds.labels.tolist() == [3]
    assert ds.samples[0, -1] == 1.0 and ds.samples[0, 0] == 0.0
    assert ds.num_classes == 24


def test_sign_csv_label_remap(tmp_path):
    rows = [f"{lab}," + ",".join(["0"] * 784) for lab in (0, 8, 10, 24)]
    ds = load_sign_csv(_sign_csv(tmp_path / "s.csv", rows))
    assert ds.labels.tolist() == [0, 8, 9, 23]


def test_sign_csv_errors(tmp_path):
    (tmp_path / "empty.csv").write_text("")
    with pytest.raises(FormatError):
        load_sign_csv(tmp_path / "empty.csv")
    with pytest.raises(FormatError, match=":3:"):
        load_sign_csv(_sign_csv(tmp_path / "a.csv", ["1," + ",".join(["0"] * 784), "1,0,0"]))
    with pytest.raises(LabelError):
        load_sign_csv(_sign_csv(tmp_path / "b.csv", ["9," + ",".join(["0"] * 784)]))


def test_blobs_balanced_and_deterministic():
    ds = synthetic_blobs(2, 10, 4, 0.5, derive_rng(1, 2))
    assert len(ds) == 20 and np.bincount(ds.labels).tolist() == [10, 10]
    again = synthetic_blobs(2, 10, 4, 0.5, derive_rng(1, 2))
    assert np.array_equal(ds.samples, again.samples)


def test_blobs_zero_spread_sits_on_centres():
    ds = synthetic_blobs(3, 4, 5, 0.0, derive_rng(0, 0), center_scale=2.0)
    for x, y in zip(ds.samples, ds.labels):
        assert np.array_equal(x, 2.0 * np.eye(5)[y])


def test_blobs_need_distinct_axes():
    with pytest.raises(ValueError):
        synthetic_blobs(5, 2, 3, 0.1, derive_rng(0, 0))


def test_shard_example_eight_samples():
    ds = Dataset(np.arange(8, dtype=float)[:, None], np.array([3, 2, 1, 0, 0, 1, 2, 3]), 4)
    plan = sort_and_shard(ds, 2, 2, 2, derive_rng(0, 0))
    for s in range(plan.num_shards):
        assert len(set(ds.labels[plan.shard_indices(s)].tolist())) == 1
    for c in range(2):
        assert len(set(ds.labels[plan.client_indices(c)].tolist())) <= 2
    assert sorted(s for a in plan.assignments for s in a) == [0, 1, 2, 3]


def test_shard_single_client_takes_everything():
    ds = Dataset(np.zeros((12, 1)), np.repeat(np.arange(3), 4), 3)
    plan = sort_and_shard(ds, 1, 4, 3, derive_rng(0, 0))
    assert plan.assignments == ((0, 1, 2, 3),)
    assert sorted(plan.client_indices(0).tolist()) == list(range(12))


def test_shard_capacity_error_names_counts():
    ds = Dataset(np.zeros((10, 1)), np.zeros(10, dtype=int), 1)
    with pytest.raises(CapacityError, match="needs 12 samples, dataset has 10"):
        sort_and_shard(ds, 2, 2, 3, derive_rng(0, 0))


@settings(max_examples=40, deadline=None)
@given(
    st.integers(2, 6),
    st.integers(1, 3),
    st.integers(1, 4),
    st.integers(0, 2**32),
)
def test_shard_invariants(num_classes, shards_per_client, num_clients, seed):
    shard_size = 5
    rng = np.random.default_rng(seed)
    # every class count >= shard_size
    counts = rng.integers(shard_size, 3 * shard_size, size=num_classes)
    labels = rng.permutation(np.repeat(np.arange(num_classes), counts))
    ds = Dataset(np.zeros((labels.size, 1)), labels, num_classes)
    if num_clients * shards_per_client * shard_size > labels.size:
        return
    plan = sort_and_shard(ds, num_clients, shards_per_client, shard_size, derive_rng(seed, 0))
    seen = set()
    for s in range(plan.num_shards):
        idx = plan.shard_indices(s)
        assert idx.size == shard_size and not (seen & set(idx.tolist()))
        seen |= set(idx.tolist())
        assert len(np.unique(labels[idx])) <= 2
    for c in range(num_clients):
        assert len(plan.assignments[c]) == shards_per_client
        assert len(np.unique(labels[plan.client_indices(c)])) <= 2 * shards_per_client


def test_split_sizes():
    ds = Dataset(np.arange(10, dtype=float)[:, None], np.array([0] * 5 + [1] * 5), 2)
    split = split_client(ds, 0.2, derive_rng(0, 0))
    assert (split.n_train, split.n_test) == (8, 2)
    # stratified: one of each class in the test split
    assert sorted(split.test_y.tolist()) == [0, 1]
    assert not set(split.train_index.tolist()) & set(split.test_index.tolist())
    tiny = split_client(ds.subset([0, 1]), 0.5, derive_rng(0, 0))
    assert (tiny.n_train, tiny.n_test) == (1, 1)


def test_split_deterministic_and_capacity():
    ds = Dataset(np.arange(20, dtype=float)[:, None], np.arange(20) % 3, 3)
    a = split_client(ds, 0.3, derive_rng(5, 1))
    b = split_client(ds, 0.3, derive_rng(5, 1))
    assert np.array_equal(a.test_index, b.test_index)
    with pytest.raises(CapacityError):
        split_client(ds.subset([0]), 0.2, derive_rng(0, 0))


@given(st.integers(2, 60), st.floats(0.01, 0.99))
def test_split_properties(n, frac):
    ds = Dataset(np.zeros((n, 1)), np.arange(n) % 4, 4)
    s = split_client(ds, frac, derive_rng(0, 0))
    assert s.n_train >= 1 and s.n_test >= 1 and s.n_train + s.n_test == n
    expected = min(max(int(np.floor(frac * n + 0.5)), 1), n - 1)
    assert s.n_test == expected


def test_build_clients_uses_plan_slices():
    ds = synthetic_blobs(4, 20, 4, 0.1, derive_rng(0, 0))
    plan = sort_and_shard(ds, 4, 2, 10, derive_rng(0, 1))
    clients = build_clients(ds, plan, 0.2, seed=3)
    assert [c.n_train + c.n_test for c in clients] == [20] * 4
    for c, client in enumerate(clients):
        held = set(ds.labels[plan.client_indices(c)].tolist())
        assert set(client.train_y.tolist()) | set(client.test_y.tolist()) == held


def test_loaders_produce_unit_pixels(tmp_path, rng):
    imgs = rng.integers(0, 256, size=(4, 3, 3), dtype=np.uint8)
    ds = load_idx(*_idx_pair(tmp_path, imgs, np.array([0, 9, 4, 2])))
    assert ds.samples.min() >= 0 and ds.samples.max() <= 1
    rows = [f"{lab}," + ",".join(str(v) for v in rng.integers(0, 256, size=784)) for lab in (0, 24)]
    sg = load_sign_csv(_sign_csv(tmp_path / "p.csv", rows))
    assert sg.samples.min() >= 0 and sg.samples.max() <= 1 and sg.labels.max() < 24
