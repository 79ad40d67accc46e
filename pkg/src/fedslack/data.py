"""Datasets, synthetic generators, IDX/CSV loaders, and the skew-based
IID / Non-IID client partitioner with equal or unequal splits.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import FormatError, PartitionError
from .streams import stream

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    """Feature vectors in [0,1] with integer class labels."""

    features: np.ndarray  # (n, d) float64
    labels: np.ndarray    # (n,) int
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.intp)
        if len(self.features) != len(self.labels):
            raise FormatError("features and labels length mismatch")
        if len(self.labels) and self.labels.max() >= self.num_classes:
            raise FormatError("label exceeds declared class count")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(self.features[indices], self.labels[indices], self.num_classes)


class PartitionMode(Enum):
    IID = "iid"
    NONIID = "noniid"


@dataclass
class PartitionSpec:
    """How to split a dataset across K clients.

    In NONIID mode each client owns a group of classes and keeps
    (100 - (K-1)*s)% of each owned class; every other client gets s%.
    """

    num_clients: int
    mode: PartitionMode = PartitionMode.NONIID
    skew: float = 0.0          # percent
    sample_counts: list[int] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 2:
            raise PartitionError("need at least 2 clients")
        if isinstance(self.mode, str):
            self.mode = PartitionMode(self.mode.lower())
        if self.mode is PartitionMode.NONIID:
            majority = 100.0 - (self.num_clients - 1) * self.skew
            if self.skew < 0 or majority <= self.skew:
                raise PartitionError(
                    f"skew {self.skew} leaves majority share {majority}% <= minority share")


@dataclass
class ClientShard:
    """A client's slice of the parent dataset, by index."""

    client_id: int
    indices: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.intp)
        if len(np.unique(self.indices)) != len(self.indices):
            raise PartitionError(f"duplicate indices in shard {self.client_id}")

    @property
    def n_samples(self) -> int:
        return len(self.indices)


def make_synthetic(n_per_class: int, num_classes: int, dim: int,
                   separation: float, seed: int, spread: float = 0.08,
                   noise_seed: int | None = None,
                   placement: str = "random") -> Dataset:
    """Gaussian clusters per class, centered around 0.5, clipped to [0,1].

    The cluster geometry depends only on `seed`; `noise_seed` (default: seed)
    controls the sample noise, so a held-out set drawn with a different
    noise_seed shares the same class distribution.  placement "orthogonal"
    puts class means on orthonormal directions (equally hard classes,
    requires dim >= num_classes); "random" draws directions uniformly.
    """
    if n_per_class < 1 or num_classes < 2 or dim < 1:
        raise ValueError("need n_per_class >= 1, num_classes >= 2, dim >= 1")
    rng_means = stream(seed, "synthetic-means")
    rng = stream(seed if noise_seed is None else noise_seed, "synthetic-points")
    if placement == "orthogonal":
        if dim < num_classes:
            raise ValueError("orthogonal placement needs dim >= num_classes")
        q, _ = np.linalg.qr(rng_means.normal(size=(dim, num_classes)))
        dirs = q.T[:num_classes]
    elif placement == "random":
        dirs = rng_means.normal(size=(num_classes, dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    else:
        raise ValueError(f"unknown placement {placement!r}")
    means = 0.5 + 0.5 * separation * dirs
    feats, labels = [], []
    for c in range(num_classes):
        pts = means[c] + spread * rng.normal(size=(n_per_class, dim))
        feats.append(np.clip(pts, 0.0, 1.0))
        labels.append(np.full(n_per_class, c))
    return Dataset(np.concatenate(feats), np.concatenate(labels), num_classes)


def load_idx(images_path, labels_path) -> Dataset:
    """Load an MNIST-style IDX image/label pair; pixels scaled to [0,1]."""
    with open(images_path, "rb") as f:
        header = f.read(16)
        if len(header) != 16:
            raise FormatError("image file header truncated")
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGE_MAGIC:
            raise FormatError(f"bad image magic 0x{magic:08x}")
        raw = f.read(count * rows * cols)
        if len(raw) != count * rows * cols:
            raise FormatError("image file truncated")
        features = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows * cols)
    with open(labels_path, "rb") as f:
        header = f.read(8)
        if len(header) != 8:
            raise FormatError("label file header truncated")
        magic, label_count = struct.unpack(">II", header)
        if magic != IDX_LABEL_MAGIC:
            raise FormatError(f"bad label magic 0x{magic:08x}")
        labels = np.frombuffer(f.read(label_count), dtype=np.uint8)
    if count != label_count:
        raise FormatError(f"image count {count} != label count {label_count}")
    num_classes = int(labels.max()) + 1 if len(labels) else 1
    return Dataset(features.astype(np.float64) / 255.0, labels.astype(np.intp),
                   max(num_classes, 2))


def load_csv(path) -> Dataset:
    """CSV with header `label,f0,f1,...`; features are floats in [0,1]."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or header[0] != "label":
            raise FormatError("csv must start with a `label` column")
        labels, feats = [], []
        for row in reader:
            if not row:
                continue
            labels.append(int(row[0]))
            feats.append([float(v) for v in row[1:]])
    if not labels:
        raise FormatError("csv contains no samples")
    labels = np.asarray(labels)
    return Dataset(np.asarray(feats), labels, int(labels.max()) + 1)


def class_groups(num_classes: int, num_clients: int) -> list[list[int]]:
    """Round-robin assignment of class ids to clients, ascending."""
    groups: list[list[int]] = [[] for _ in range(num_clients)]
    for c in range(num_classes):
        groups[c % num_clients].append(c)
    return groups


def _noniid_class_split(n_c: int, owner: int, spec: PartitionSpec,
                        order: np.ndarray) -> list[np.ndarray]:
    """Split one class's shuffled index array across clients by the skew rule."""
    K = spec.num_clients
    minority = int(np.floor(n_c * spec.skew / 100.0 + 0.5))
    chunks: list[np.ndarray] = [None] * K
    off = 0
    for k in range(K):
        if k == owner:
            continue
        chunks[k] = order[off:off + minority]
        off += minority
    chunks[owner] = order[off:]  # remainder goes to the majority client
    if len(chunks[owner]) < minority:
        raise PartitionError(
            f"skew {spec.skew} leaves the majority client under-represented")
    return chunks


def partition(dataset: Dataset, spec: PartitionSpec) -> list[ClientShard]:
    """Equal-split partition: disjoint shards covering the whole dataset."""
    K = spec.num_clients
    rng = stream(spec.seed, "partition")
    if spec.mode is PartitionMode.IID:
        order = rng.permutation(len(dataset))
        parts = np.array_split(order, K)
        return [ClientShard(k, np.sort(parts[k])) for k in range(K)]

    groups = class_groups(dataset.num_classes, K)
    owner_of = {c: k for k, cls in enumerate(groups) for c in cls}
    per_client: list[list[np.ndarray]] = [[] for _ in range(K)]
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        order = rng.permutation(idx)
        for k, chunk in enumerate(_noniid_class_split(len(idx), owner_of[c], spec, order)):
            per_client[k].append(chunk)
    return [ClientShard(k, np.sort(np.concatenate(per_client[k])))
            for k in range(K)]


def partition_unequal(dataset: Dataset, spec: PartitionSpec) -> list[ClientShard]:
    """Partition with exact per-client sample counts, preserving the skew bias."""
    if spec.sample_counts is None:
        raise PartitionError("sample_counts required for unequal partition")
    counts = [int(c) for c in spec.sample_counts]
    K = spec.num_clients
    if len(counts) != K:
        raise PartitionError(f"got {len(counts)} counts for {K} clients")
    if any(c <= 0 for c in counts):
        raise PartitionError("sample counts must be positive")
    if sum(counts) > len(dataset):
        raise PartitionError("sample counts exceed dataset size")

    rng = stream(spec.seed, "partition-unequal")
    C = dataset.num_classes
    class_pools = [list(rng.permutation(np.flatnonzero(dataset.labels == c)))
                   for c in range(C)]
    pool_sizes = np.array([len(p) for p in class_pools], dtype=np.float64)

    if spec.mode is PartitionMode.IID:
        share = np.ones((K, C))
    else:
        groups = class_groups(C, K)
        owner_of = {c: k for k, cls in enumerate(groups) for c in cls}
        majority = (100.0 - (K - 1) * spec.skew) / 100.0
        share = np.full((K, C), spec.skew / 100.0)
        for c in range(C):
            share[owner_of[c], c] = majority

    shards = []
    for k in range(K):
        weights = share[k] * pool_sizes
        if weights.sum() <= 0:
            raise PartitionError(f"client {k} has no feasible class mass")
        target = weights / weights.sum() * counts[k]
        want = np.floor(target).astype(int)
        # distribute the rounding remainder to the largest fractional parts
        short = counts[k] - int(want.sum())
        frac_order = np.argsort(-(target - want))
        for c in frac_order[:short]:
            want[c] += 1
        taken = []
        for c in range(C):
            if want[c] > len(class_pools[c]):
                raise PartitionError(
                    f"client {k} needs {want[c]} samples of class {c}, "
                    f"pool has {len(class_pools[c])}")
            for _ in range(want[c]):
                taken.append(class_pools[c].pop())
        shards.append(ClientShard(k, np.sort(np.asarray(taken, dtype=np.intp))))
    return shards


def class_counts(dataset: Dataset, shards: list[ClientShard]) -> np.ndarray:
    """Per-client per-class sample counts, shape (K, C)."""
    table = np.zeros((len(shards), dataset.num_classes), dtype=int)
    for shard in shards:
        for c, n in zip(*np.unique(dataset.labels[shard.indices], return_counts=True)):
            table[shard.client_id, c] = n
    return table
