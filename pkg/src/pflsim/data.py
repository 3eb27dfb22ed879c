"""Dataset loaders (MNIST IDX, Sign-MNIST CSV, synthetic blobs) and the label-sort shard partitioner."""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CapacityError, ConsistencyError, DataIOError, FormatError, LabelError
from .numerics import derive_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# Sign-MNIST has no J (9) or Z (25): both need motion.
SIGN_ALPHABET = tuple(k for k in range(25) if k != 9)
_SIGN_REMAP = {label: idx for idx, label in enumerate(SIGN_ALPHABET)}


@dataclass(frozen=True)
class Dataset:
    samples: np.ndarray  # [N, input_dim], float64
    labels: np.ndarray  # [N], int64
    num_classes: int

    def __post_init__(self) -> None:
        if self.samples.ndim != 2:
            raise FormatError(f"samples must be 2-D, got shape {self.samples.shape}")
        if self.labels.shape != (self.samples.shape[0],):
            raise ConsistencyError(f"{self.samples.shape[0]} samples but labels of shape {self.labels.shape}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise LabelError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return int(self.labels.size)

    @property
    def input_dim(self) -> int:
        return int(self.samples.shape[1])

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.samples[idx], self.labels[idx], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def _read_bytes(path) -> bytes:
    path = Path(path)
    try:
        if path.suffix == ".gz":
            with gzip.open(path, "rb") as fh:
                return fh.read()
        return path.read_bytes()
    except FileNotFoundError:
        raise
    except (OSError, EOFError) as exc:
        raise DataIOError(f"{path}: {exc}") from exc


def _parse_idx(raw: bytes, expected_magic: int, path) -> tuple[tuple[int, ...], np.ndarray]:
    if len(raw) < 8:
        raise DataIOError(f"{path}: truncated header ({len(raw)} bytes)")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataIOError(f"{path}: truncated header ({len(raw)} bytes)")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise DataIOError(f"{path}: truncated payload ({len(raw) - header} of {size} bytes)")
    if len(raw) - header > size:
        raise FormatError(f"{path}: {len(raw) - header - size} trailing bytes")
    data = np.frombuffer(raw, dtype=np.uint8, count=size, offset=header)
    return dims, data


def load_idx(images_path, labels_path) -> Dataset:
    """Load an MNIST-style IDX image/label pair; pixels become ``byte / 255``."""
    dims, pixels = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    ldims, labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path)
    n, rows, cols = dims
    if ldims[0] != n:
        raise ConsistencyError(f"{images_path} holds {n} images but {labels_path} holds {ldims[0]} labels")
    samples = pixels.reshape(n, rows * cols).astype(np.float64) / 255.0
    return Dataset(samples, labels.astype(np.int64), num_classes=10)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write ``uint8`` images ``[N, rows, cols]`` and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, labels.size) + labels.tobytes())


def load_sign_csv(path) -> Dataset:
    """Load a Sign-MNIST CSV (header, then ``label,pixel1..pixel784``)."""
    labels: list[int] = []
    rows: list[list[int]] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise FormatError(f"{path}: empty file")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 785:
                raise FormatError(f"{path}:{line_no}: expected 785 fields, got {len(row)}")
            try:
                values = [int(v) for v in row]
            except ValueError as exc:
                raise FormatError(f"{path}:{line_no}: {exc}") from exc
            if values[0] not in _SIGN_REMAP:
                raise LabelError(f"{path}:{line_no}: label {values[0]} not in the Sign-MNIST alphabet")
            pix = values[1:]
            if min(pix) < 0 or max(pix) > 255:
                raise FormatError(f"{path}:{line_no}: pixel outside 0..255")
            labels.append(_SIGN_REMAP[values[0]])
            rows.append(pix)
    if not rows:
        raise FormatError(f"{path}: no data rows")
    samples = np.asarray(rows, dtype=np.float64) / 255.0
    return Dataset(samples, np.asarray(labels, dtype=np.int64), num_classes=len(SIGN_ALPHABET))


def synthetic_blobs(
    num_classes: int,
    per_class: int,
    dim: int,
    spread: float,
    rng: np.random.Generator,
    center_scale: float = 1.0,
) -> Dataset:
    """Isotropic Gaussian clusters centred at ``center_scale * e_k``, samples grouped by class."""
    if num_classes < 1 or per_class < 1 or dim < 1:
        raise ValueError("num_classes, per_class and dim must be >= 1")
    if spread < 0:
        raise ValueError(f"spread must be non-negative, got {spread}")
    if dim < num_classes:
        raise ValueError(f"dim ({dim}) must be >= num_classes ({num_classes}) so centres sit on distinct axes")
    centers = center_scale * np.eye(dim)[:num_classes]
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    noise = rng.standard_normal((labels.size, dim))
    return Dataset(centers[labels] + spread * noise, labels, num_classes)


@dataclass(frozen=True)
class ShardPlan:
    shard_size: int
    assignments: tuple[tuple[int, ...], ...]  # per client, shard indices
    order: np.ndarray  # stable label-sort permutation of the dataset

    @property
    def num_clients(self) -> int:
        return len(self.assignments)

    @property
    def num_shards(self) -> int:
        return sum(len(a) for a in self.assignments)

    def shard_indices(self, shard: int) -> np.ndarray:
        return self.order[shard * self.shard_size : (shard + 1) * self.shard_size]

    def client_indices(self, client: int) -> np.ndarray:
        return np.concatenate([self.shard_indices(s) for s in self.assignments[client]])

    def label_histograms(self, dataset: Dataset) -> np.ndarray:
        """``[num_clients, num_classes]`` label counts."""
        return np.stack(
            [np.bincount(dataset.labels[self.client_indices(c)], minlength=dataset.num_classes) for c in range(self.num_clients)]
        )


def sort_and_shard(
    dataset: Dataset,
    num_clients: int,
    shards_per_client: int,
    shard_size: int,
    rng: np.random.Generator,
) -> ShardPlan:
    """Sort by label, cut consecutive equal shards, deal them out at random.

    Samples past ``num_clients * shards_per_client * shard_size`` are dropped.
    """
    if min(num_clients, shards_per_client, shard_size) < 1:
        raise ValueError("num_clients, shards_per_client and shard_size must be >= 1")
    num_shards = num_clients * shards_per_client
    required = num_shards * shard_size
    if required > len(dataset):
        raise CapacityError(
            f"{num_clients} clients x {shards_per_client} shards x {shard_size} samples "
            f"needs {required} samples, dataset has {len(dataset)}"
        )
    order = np.argsort(dataset.labels, kind="stable")
    dealt = rng.permutation(num_shards).reshape(num_clients, shards_per_client)
    assignments = tuple(tuple(int(s) for s in sorted(row)) for row in dealt)
    return ShardPlan(shard_size=shard_size, assignments=assignments, order=order)


@dataclass(frozen=True)
class ClientDataset:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    train_index: np.ndarray  # positions within the client's slice
    test_index: np.ndarray

    @property
    def n_train(self) -> int:
        return int(self.train_y.size)

    @property
    def n_test(self) -> int:
        return int(self.test_y.size)


def _test_quotas(counts: np.ndarray, target: int) -> np.ndarray:
    exact = counts * (target / counts.sum())
    quota = np.minimum(np.floor(exact).astype(np.int64), counts)
    remainder = exact - quota
    # largest remainder first; ties to the lower class id
    for k in sorted(range(counts.size), key=lambda k: (-remainder[k], k)):
        if quota.sum() >= target:
            break
        if quota[k] < counts[k]:
            quota[k] += 1
    k = 0
    while quota.sum() < target:
        if quota[k] < counts[k]:
            quota[k] += 1
        k = (k + 1) % counts.size
    return quota


def split_client(dataset_slice: Dataset, holdout_fraction: float, rng: np.random.Generator) -> ClientDataset:
    """Stratified train/test split with ``round(holdout_fraction * n)`` test samples (>= 1)."""
    if not 0.0 < holdout_fraction < 1.0:
        raise ValueError(f"holdout_fraction must be in (0, 1), got {holdout_fraction}")
    n = len(dataset_slice)
    if n < 2:
        raise CapacityError(f"cannot split {n} sample(s) into train and test")
    target = min(max(int(np.floor(holdout_fraction * n + 0.5)), 1), n - 1)
    labels = dataset_slice.labels
    classes = np.unique(labels)
    counts = np.array([(labels == c).sum() for c in classes])
    quotas = _test_quotas(counts, target)
    test_parts = []
    for c, q in zip(classes, quotas):
        members = np.flatnonzero(labels == c)
        test_parts.append(rng.permutation(members)[:q])
    test_index = np.sort(np.concatenate(test_parts)).astype(np.int64)
    train_mask = np.ones(n, dtype=bool)
    train_mask[test_index] = False
    train_index = np.flatnonzero(train_mask)
    x, y = dataset_slice.samples, dataset_slice.labels
    return ClientDataset(x[train_index], y[train_index], x[test_index], y[test_index], train_index, test_index)


def build_clients(
    dataset: Dataset, plan: ShardPlan, holdout_fraction: float, seed: int
) -> list[ClientDataset]:
    clients = []
    for c in range(plan.num_clients):
        rng = derive_rng(seed, SPLIT_STREAM + c)
        clients.append(split_client(dataset.subset(plan.client_indices(c)), holdout_fraction, rng))
    return clients


# RNG stream ids well away from the per-client/per-round streams (client_id * 2**20 + round).
PARTITION_STREAM = 1 << 60
SPLIT_STREAM = 1 << 61
