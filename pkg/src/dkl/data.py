"""Synthetic datasets, stratified splits, and the binary logits file.

Features always live in the unit box [0, 1]^D so the infinity-ball of
adversarial training has a fixed meaning. Datasets are immutable after
creation and safe to share across threads.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FileFormatError

__all__ = [
    "Dataset",
    "gaussian_mixture",
    "split",
    "export_logits",
    "import_logits",
    "load_csv",
]

LOGITS_MAGIC = b"DKLL"


@dataclass(frozen=True)
class Dataset:
    """Feature matrix in [0, 1]^D with integer class labels."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise ValueError(f"features {x.shape} and labels {y.shape} disagree")
        if not np.all(np.isfinite(x)):
            raise ValueError("features must be finite")
        if x.min(initial=0.0) < -1e-9 or x.max(initial=1.0) > 1.0 + 1e-9:
            raise ValueError("features must lie in [0, 1]; normalize before building the dataset")
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if np.any(y < 0) or np.any(y >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        counts = np.bincount(y, minlength=self.num_classes)
        if np.any(counts == 0):
            raise ValueError(f"every class needs samples, class {int(np.argmin(counts))} is empty")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        x.setflags(write=False)
        y.setflags(write=False)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def gaussian_mixture(num_classes: int, dim: int, n_per_class: int, spread: float,
                     seed: int = 0) -> Dataset:
    """Isotropic Gaussian blobs on a ring, min-max rescaled to [0, 1]^D.

    Class means sit on the unit circle in the first two feature dimensions
    (zero elsewhere), so small spreads give linearly separable classes and
    larger spreads overlap neighbours. Deterministic per seed.
    """
    if num_classes < 2 or dim < 2 or n_per_class < 1:
        raise ValueError(f"invalid sizes: C={num_classes}, D={dim}, n={n_per_class}")
    if not np.isfinite(spread) or spread <= 0:
        raise ValueError(f"spread must be positive, got {spread}")
    rng = np.random.Generator(np.random.PCG64(seed))
    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
    means = np.zeros((num_classes, dim))
    means[:, 0] = np.cos(angles)
    means[:, 1] = np.sin(angles)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    x = means[labels] + spread * rng.standard_normal((labels.size, dim))
    lo = x.min(axis=0)
    span = x.max(axis=0) - lo
    span[span == 0.0] = 1.0
    x = (x - lo) / span
    return Dataset(x, labels, num_classes)


def split(dataset: Dataset, test_fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified train/test split, deterministic per seed.

    Each class contributes round(fraction * count) test samples, clamped
    so both sides keep at least one sample per class.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    rng = np.random.Generator(np.random.PCG64(seed))
    train_idx, test_idx = [], []
    for cls_idx in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == cls_idx)
        if idx.size < 2:
            raise ValueError(f"class {cls_idx} has {idx.size} sample(s), too few to stratify")
        perm = rng.permutation(idx)
        n_test = int(np.clip(round(test_fraction * idx.size), 1, idx.size - 1))
        test_idx.append(perm[:n_test])
        train_idx.append(perm[n_test:])
    train_idx = np.concatenate(train_idx)
    test_idx = np.concatenate(test_idx)
    make = lambda sel: Dataset(dataset.features[sel].copy(), dataset.labels[sel].copy(),
                               dataset.num_classes)
    return make(train_idx), make(test_idx)


def export_logits(path, logits) -> None:
    """Binary logits cache: magic, u32 N, u32 C, little-endian float64 rows."""
    arr = np.asarray(logits, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"logits must be 2-d, got shape {arr.shape}")
    if arr.size and not np.all(np.isfinite(arr)):
        raise ValueError("logits must be finite")
    with open(path, "wb") as fh:
        fh.write(LOGITS_MAGIC)
        fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def import_logits(path) -> np.ndarray:
    """Bit-exact counterpart of export_logits."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != LOGITS_MAGIC:
        raise FileFormatError(f"{path}: bad magic {blob[:4]!r}, expected {LOGITS_MAGIC!r}")
    if len(blob) < 12:
        raise FileFormatError(f"{path}: truncated header")
    n, c = struct.unpack_from("<II", blob, 4)
    payload = np.frombuffer(blob, dtype="<f8", offset=12)
    if payload.size != n * c:
        raise FileFormatError(f"{path}: payload holds {payload.size} floats, header says {n}x{c}")
    return payload.reshape(n, c).copy()


def load_csv(path, normalize: bool = False) -> Dataset:
    """Small external datasets: D feature columns then a 'label' column.

    Numeric parsing is locale-independent ('.' decimal separator). With
    normalize, features are min-max rescaled per dimension to [0, 1];
    otherwise they must already lie there.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FileFormatError(f"{path}: empty file") from None
        if len(header) < 2 or header[-1].strip() != "label":
            raise FileFormatError(f"{path}:1: last column must be named 'label', got {header!r}")
        dim = len(header) - 1
        feats, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != dim + 1:
                raise FileFormatError(f"{path}:{lineno}: expected {dim + 1} columns, got {len(row)}")
            try:
                feats.append([float(v) for v in row[:-1]])
                labels.append(int(row[-1]))
            except ValueError as exc:
                raise FileFormatError(f"{path}:{lineno}: {exc}") from None
    if not feats:
        raise FileFormatError(f"{path}: no data rows")
    x = np.array(feats)
    y = np.array(labels)
    if y.min() < 0:
        raise FileFormatError(f"{path}: labels must be nonnegative integers")
    if normalize:
        lo = x.min(axis=0)
        span = x.max(axis=0) - lo
        span[span == 0.0] = 1.0
        x = (x - lo) / span
    return Dataset(x, y, int(y.max()) + 1)
