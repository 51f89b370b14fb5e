"""Datasets, IDX/CSV ingestion and the double-Dirichlet participant partitioner."""
from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np

from .models import ConfigurationError, Minibatch

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IngestionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    split_tag: str = "train"

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] != len(self.labels):
            raise ConfigurationError("features and labels are not row-aligned")
        if self.split_tag not in ("train", "test"):
            raise ConfigurationError(f"bad split tag {self.split_tag!r}")

    def __len__(self):
        return len(self.labels)

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def as_minibatch(self) -> Minibatch:
        return Minibatch(self.features, self.labels)


@dataclass(frozen=True, eq=False)
class DataShard:
    """Index view of a dataset owned by one participant.

    ``label_map`` is applied lazily when labels are read, so attacks never
    touch the underlying dataset.
    """

    owner: int
    indices: np.ndarray
    dataset: Dataset
    role_use: str = "training"
    label_map: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.indices)

    @property
    def features(self) -> np.ndarray:
        return self.dataset.features[self.indices]

    @property
    def labels(self) -> np.ndarray:
        raw = self.dataset.labels[self.indices]
        if self.label_map is None:
            return raw
        return self.label_map[raw]

    def as_minibatch(self) -> Minibatch:
        return Minibatch(self.features, self.labels)


@dataclass(frozen=True)
class PartitionConfig:
    lam: float = 1.0
    num_participants: int = 20
    seed: int = 0
    min_shard_size: int = 64

    def __post_init__(self):
        if not self.lam > 0:
            raise ConfigurationError("lambda must be positive")
        if self.num_participants < 3:
            raise ConfigurationError("need at least 3 participants (worker, validator, miner)")
        if self.min_shard_size < 1:
            raise ConfigurationError("min_shard_size must be >= 1")


def generate_synthetic(num_samples: int, input_dim: int, num_classes: int,
                       class_separation: float, seed: int) -> Dataset:
    """Gaussian blobs with unit-variance noise around random class centres.

    Centres are random unit directions scaled by ``class_separation``; labels
    are balanced up to one sample and then shuffled.
    """
    if num_samples < num_classes:
        raise ConfigurationError("need at least one sample per class")
    rng = np.random.default_rng(seed)
    centres = rng.standard_normal((num_classes, input_dim))
    centres /= np.linalg.norm(centres, axis=1, keepdims=True)
    centres *= class_separation
    labels = rng.permutation(np.arange(num_samples) % num_classes)
    features = centres[labels] + rng.standard_normal((num_samples, input_dim))
    return Dataset(features, labels.astype(np.int64), num_classes, "train")


def train_test_split(dataset: Dataset, num_test: int, seed: int):
    if not 0 < num_test < len(dataset):
        raise ConfigurationError("num_test must leave both splits non-empty")
    order = np.random.default_rng(seed).permutation(len(dataset))
    test_idx, train_idx = np.sort(order[:num_test]), np.sort(order[num_test:])
    c = dataset.num_classes
    train = Dataset(dataset.features[train_idx], dataset.labels[train_idx], c, "train")
    test = Dataset(dataset.features[test_idx], dataset.labels[test_idx], c, "test")
    if len(np.unique(train.labels)) < c:
        raise ConfigurationError("train split lost a class; use more samples")
    return train, test


def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path, magic: int, item_dims: int) -> np.ndarray:
    with _open(path) as fh:
        raw = fh.read()
    header = 4 * (2 + item_dims)
    if len(raw) < header:
        raise IngestionError(f"{path}: file too short for an IDX header ({len(raw)} bytes)")
    found, count, *dims = struct.unpack(">" + "I" * (2 + item_dims), raw[:header])
    if found != magic:
        raise IngestionError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    expected = count * int(np.prod(dims, dtype=np.int64))
    body = raw[header:]
    if len(body) != expected:
        raise IngestionError(
            f"{path}: payload has {len(body)} bytes, header promises {expected}"
        )
    return np.frombuffer(body, dtype=np.uint8).reshape(count, *dims)


def load_idx(images_path, labels_path, split_tag: str = "train") -> Dataset:
    """Read an MNIST-layout image/label pair; pixels scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 2)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 0)
    if len(images) != len(labels):
        raise IngestionError(f"{len(images)} images but {len(labels)} labels")
    if len(images) == 0:
        raise IngestionError("IDX files contain no samples")
    features = images.reshape(len(images), -1).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    return Dataset(features, labels, int(labels.max()) + 1, split_tag)


def save_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(dataset.input_dim)] + ["label"])
        for row, label in zip(dataset.features, dataset.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


def load_csv(path, num_classes: Optional[int] = None, split_tag: str = "train") -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[-1] != "label":
            raise IngestionError(f"{path}: expected header f0..fN,label")
        rows = [r for r in reader if r]
    if not rows:
        raise IngestionError(f"{path}: no data rows")
    features = np.array([[float(v) for v in r[:-1]] for r in rows])
    labels = np.array([int(r[-1]) for r in rows], dtype=np.int64)
    c = num_classes if num_classes is not None else int(labels.max()) + 1
    return Dataset(features, labels, c, split_tag)


def _round_to_total(weights: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder rounding of ``total * weights`` to integers summing to ``total``."""
    raw = weights * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    if short > 0:
        # stable sort keeps ties at the lower index
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def partition(dataset: Dataset, cfg: PartitionConfig) -> List[DataShard]:
    """Split the training set into disjoint shards with size and label skew.

    Shard sizes are ``min_shard_size`` plus a Dirichlet(lam)-weighted share of
    the remaining pool; each shard's class mix is its own Dirichlet(lam) draw.
    Participants are served in a random order and fall back to the classes they
    favour most when a class pool runs dry. Every sample is assigned.
    """
    n, p, c = len(dataset), cfg.num_participants, dataset.num_classes
    if n == 0:
        raise ConfigurationError("cannot partition an empty dataset")
    if p * cfg.min_shard_size > n:
        raise ConfigurationError(
            f"{p} shards of at least {cfg.min_shard_size} need {p * cfg.min_shard_size} "
            f"samples, dataset has {n}"
        )
    rng = np.random.default_rng(cfg.seed)
    size_share = rng.dirichlet(np.full(p, cfg.lam))
    sizes = cfg.min_shard_size + _round_to_total(size_share, n - p * cfg.min_shard_size)
    mixes = rng.dirichlet(np.full(c, cfg.lam), size=p)

    pools = [rng.permutation(np.flatnonzero(dataset.labels == k)) for k in range(c)]
    cursor = np.zeros(c, dtype=np.int64)
    remaining = np.array([len(pl) for pl in pools], dtype=np.int64)

    chosen = {}
    for owner in rng.permutation(p):
        want = _round_to_total(mixes[owner], int(sizes[owner]))
        take = np.minimum(want, remaining)
        deficit = int(sizes[owner] - take.sum())
        preference = np.argsort(-mixes[owner], kind="stable")
        while deficit > 0:
            for k in preference:
                if deficit == 0:
                    break
                if remaining[k] - take[k] > 0:
                    take[k] += 1
                    deficit -= 1
        parts = []
        for k in range(c):
            parts.append(pools[k][cursor[k] : cursor[k] + take[k]])
            cursor[k] += take[k]
            remaining[k] -= take[k]
        chosen[int(owner)] = np.sort(np.concatenate(parts))
    return [DataShard(i, chosen[i], dataset) for i in range(p)]
