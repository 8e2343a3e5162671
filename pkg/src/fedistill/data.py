"""Datasets and federated sharding."""

from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .seeding import child_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


class AllocationError(ValueError):
    pass


@dataclass
class LabeledDataset:
    samples: np.ndarray  # (n, d_x) float64
    labels: np.ndarray  # (n,) int64
    label_count: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if self.samples.ndim != 2:
            raise ValueError("samples must be a 2-D array")
        if self.samples.shape[0] != self.labels.shape[0]:
            raise ValueError("samples and labels differ in length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.label_count):
            raise ValueError(f"labels must lie in [0, {self.label_count})")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def one_hot(self, idx=None) -> np.ndarray:
        labels = self.labels if idx is None else self.labels[idx]
        return np.eye(self.label_count)[labels]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.samples[idx], self.labels[idx], self.label_count)

    def label_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.label_count)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.samples, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        h.update(str(self.label_count).encode())
        return h.hexdigest()

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            for x, y in zip(self.samples, self.labels):
                writer.writerow([f"{v:.17g}" for v in x] + [int(y)])


def synth_classification(classes, per_class, dim, seed=0, spread=0.3) -> LabeledDataset:
    """Gaussian blob per class; means ~ N(0, I), within-class std ``spread``."""
    if min(classes, per_class, dim) <= 0:
        raise ValueError("classes, per_class and dim must be positive")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((classes, dim))
    labels = np.repeat(np.arange(classes), per_class)
    samples = means[labels] + spread * rng.standard_normal((labels.size, dim))
    order = rng.permutation(labels.size)
    return LabeledDataset(samples[order], labels[order], classes)


def train_test_split(ds: LabeledDataset, test_fraction=0.2, seed=0):
    """Stratified split; each label contributes ``round(test_fraction * count)`` test samples."""
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for label in range(ds.label_count):
        idx = np.flatnonzero(ds.labels == label)
        idx = idx[rng.permutation(idx.size)]
        n_test = int(round(test_fraction * idx.size))
        test_idx.append(idx[:n_test])
        train_idx.append(idx[n_test:])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    return ds.subset(train_idx), ds.subset(test_idx)


def _read_header(buf, magic, name):
    if len(buf) < 8:
        raise IdxFormatError(f"{name}: truncated header ({len(buf)} bytes)")
    found, count = struct.unpack(">II", buf[:8])
    if found != magic:
        raise IdxFormatError(f"{name}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    return count


def load_idx(images_path, labels_path, label_count=10) -> LabeledDataset:
    """Read an IDX image/label file pair; pixels are scaled to [0, 1]."""
    with open(images_path, "rb") as fh:
        img = fh.read()
    with open(labels_path, "rb") as fh:
        lab = fh.read()
    n_img = _read_header(img, IDX_IMAGES_MAGIC, "images")
    if len(img) < 16:
        raise IdxFormatError("images: truncated header")
    rows, cols = struct.unpack(">II", img[8:16])
    need = 16 + n_img * rows * cols
    if len(img) < need:
        raise IdxFormatError(f"images: truncated payload ({len(img)} of {need} bytes)")
    n_lab = _read_header(lab, IDX_LABELS_MAGIC, "labels")
    if len(lab) < 8 + n_lab:
        raise IdxFormatError(f"labels: truncated payload ({len(lab)} of {8 + n_lab} bytes)")
    if n_img != n_lab:
        raise IdxFormatError(f"image count {n_img} != label count {n_lab}")
    pixels = np.frombuffer(img, dtype=np.uint8, count=n_img * rows * cols, offset=16)
    labels = np.frombuffer(lab, dtype=np.uint8, count=n_lab, offset=8)
    samples = pixels.reshape(n_img, rows * cols).astype(np.float64) / 255.0
    return LabeledDataset(samples, labels.astype(np.int64), label_count)


def write_idx(images, labels, images_path, labels_path) -> None:
    """Write ``uint8`` images of shape (n, rows, cols) and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.size))
        fh.write(labels.tobytes())


@dataclass
class ShardPlan:
    """How to split a dataset across workers.

    For ``non_iid`` with no explicit ``per_worker_counts``, each worker gets
    ``rare_count`` samples of ``rare_labels`` randomly chosen labels and
    ``common_count`` of every other label.
    """

    mode: str = "iid"
    per_worker_counts: Optional[Dict[int, Dict[int, int]]] = None
    seed: int = 0
    rare_labels: int = 2
    rare_count: int = 2
    common_count: int = 62

    def __post_init__(self):
        if self.mode not in ("iid", "non_iid"):
            raise ValueError(f"shard mode must be 'iid' or 'non_iid', got {self.mode!r}")

    def counts_for(self, worker: int, label_count: int) -> Dict[int, int]:
        if self.per_worker_counts is not None:
            counts = self.per_worker_counts.get(worker, self.per_worker_counts.get(str(worker)))
            if counts is None:
                raise AllocationError(f"plan has no counts for worker {worker}")
            counts = {int(k): int(v) for k, v in counts.items()}
            if any(v < 0 for v in counts.values()):
                raise AllocationError("sample counts must be non-negative")
            return counts
        rng = child_rng(self.seed, "shard-labels", worker)
        rare = set(rng.choice(label_count, size=self.rare_labels, replace=False).tolist())
        return {label: (self.rare_count if label in rare else self.common_count)
                for label in range(label_count)}


def shard(ds: LabeledDataset, workers: int, plan: ShardPlan) -> list:
    """Split ``ds`` into ``workers`` disjoint shards."""
    if workers <= 0:
        raise ValueError("need at least one worker")
    rng = child_rng(plan.seed, "shard", plan.mode)
    pools = {}
    for label in range(ds.label_count):
        idx = np.flatnonzero(ds.labels == label)
        pools[label] = idx[rng.permutation(idx.size)]

    if plan.mode == "iid":
        parts = [[] for _ in range(workers)]
        for label in range(ds.label_count):
            for w, chunk in enumerate(np.array_split(pools[label], workers)):
                parts[w].append(chunk)
        return [ds.subset(np.sort(np.concatenate(p))) for p in parts]

    counts = [plan.counts_for(w, ds.label_count) for w in range(workers)]
    for label in range(ds.label_count):
        need = sum(c.get(label, 0) for c in counts)
        if need > pools[label].size:
            raise AllocationError(f"label {label} needs {need} samples but only "
                                  f"{pools[label].size} are available")
    cursor = {label: 0 for label in pools}
    shards = []
    for w in range(workers):
        chosen = []
        for label in range(ds.label_count):
            k = counts[w].get(label, 0)
            chosen.append(pools[label][cursor[label]:cursor[label] + k])
            cursor[label] += k
        shards.append(ds.subset(np.sort(np.concatenate(chosen))))
    return shards
