"""Synthetic classification data and client partitioning."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import PartitionError

MAX_PARTITION_RETRIES = 100


@dataclass(frozen=True)
class LabeledDataset:
    samples: np.ndarray  # (N, d)
    labels: np.ndarray  # (N,)
    class_count: int

    def __post_init__(self):
        if len(self.labels) == 0:
            raise ValueError("dataset is empty")
        if len(self.samples) != len(self.labels):
            raise ValueError(f"{len(self.samples)} samples but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ValueError(f"labels outside [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def subset(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.samples[indices], self.labels[indices], self.class_count)


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    indices: np.ndarray
    label_histogram: np.ndarray

    def __len__(self):
        return len(self.indices)


def label_histogram(labels: np.ndarray, class_count: int) -> np.ndarray:
    return np.bincount(np.asarray(labels, dtype=np.int64), minlength=class_count)


def make_shard(ds: LabeledDataset, client_id: int, indices) -> ClientShard:
    indices = np.sort(np.asarray(indices, dtype=np.int64))
    return ClientShard(client_id, indices, label_histogram(ds.labels[indices], ds.class_count))


def make_synthetic(
    n_classes: int,
    dim: int,
    samples_per_class: int,
    seed: int,
    separation: float = 3.0,
) -> LabeledDataset:
    """Gaussian blobs, one per class.

    Class means are drawn from the seeded RNG and rescaled to norm
    ``separation``; samples add isotropic unit-variance noise. Rows are
    ordered class by class.
    """
    if min(n_classes, dim, samples_per_class) <= 0:
        raise ValueError("n_classes, dim and samples_per_class must be positive")
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(n_classes, dim))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)
    labels = np.repeat(np.arange(n_classes), samples_per_class)
    samples = means[labels] + rng.normal(size=(len(labels), dim))
    return LabeledDataset(samples, labels, n_classes)


def train_test_split(ds: LabeledDataset, seed: int, test_fraction: float = 0.2):
    """Stratified split; per class ``round(test_fraction * count)`` go to test."""
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(ds.class_count):
        idx = np.flatnonzero(ds.labels == c)
        idx = rng.permutation(idx)
        n_test = int(round(test_fraction * len(idx)))
        test_idx.append(idx[:n_test])
        train_idx.append(idx[n_test:])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    return ds.subset(train_idx), ds.subset(test_idx)


def partition_iid(ds: LabeledDataset, clients: int, seed: int) -> list[ClientShard]:
    if clients < 1:
        raise ValueError("clients must be >= 1")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ds))
    # array_split puts the remainder one-per-client on the first shards
    return [make_shard(ds, cid, part) for cid, part in enumerate(np.array_split(order, clients))]


def partition_dirichlet(ds: LabeledDataset, clients: int, alpha: float, seed: int) -> list[ClientShard]:
    """Label-skewed partition.

    For every class independently, client proportions are drawn from
    ``Dirichlet(alpha * ones(clients))`` and the (shuffled) class samples are
    cut at the cumulative proportions. Draws leaving any client empty are
    redrawn from the same stream, at most ``MAX_PARTITION_RETRIES`` times.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if clients < 1:
        raise ValueError("clients must be >= 1")
    rng = np.random.default_rng(seed)
    by_class = [np.flatnonzero(ds.labels == c) for c in range(ds.class_count)]
    for _ in range(MAX_PARTITION_RETRIES):
        assigned = [[] for _ in range(clients)]
        for idx in by_class:
            if len(idx) == 0:
                continue
            idx = rng.permutation(idx)
            props = rng.dirichlet(np.full(clients, alpha))
            cuts = (np.cumsum(props)[:-1] * len(idx)).astype(np.int64)
            for cid, part in enumerate(np.split(idx, cuts)):
                assigned[cid].append(part)
        sizes = [sum(len(p) for p in parts) for parts in assigned]
        if min(sizes) > 0:
            return [make_shard(ds, cid, np.concatenate(parts)) for cid, parts in enumerate(assigned)]
    raise PartitionError(
        f"could not give all {clients} clients a sample after {MAX_PARTITION_RETRIES} draws "
        f"(alpha={alpha}); use a larger dataset or fewer clients"
    )


def export_csv(ds: LabeledDataset, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{j}" for j in range(ds.dim)] + ["label"])
        for row, label in zip(ds.samples, ds.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


def import_csv(path, class_count: int | None = None) -> LabeledDataset:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        rows = list(reader)
    samples = np.array([[float(v) for v in r[:-1]] for r in rows])
    labels = np.array([int(r[-1]) for r in rows], dtype=np.int64)
    if class_count is None:
        class_count = int(labels.max()) + 1
    return LabeledDataset(samples, labels, class_count)
