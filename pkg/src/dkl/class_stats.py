"""Per-class running mean probability vectors and derived quantities.

The table keeps one probability row per ground-truth class: the running
mean of softmax(logits / temperature) over that class's samples. Losses
read the rows as constants (no gradient ever flows into the table); the
training loop is the single writer, updating between steps.
"""
from __future__ import annotations

import numpy as np

from .numerics import _check_probs, outer_weight, softmax

__all__ = ["ClassStats", "exact_recompute"]


class ClassStats:
    """Class-conditional mean probability table with EMA updates.

    rows[y] is the mean probability vector of class y, always a valid
    distribution. Updates blend the current batch's class means into the
    stored rows with momentum mu and renormalize:

        row_y <- normalize((1 - mu) * batch_mean_y + mu * row_y)

    counts[y] tracks how many samples of class y have been absorbed.
    """

    def __init__(self, rows, temperature: float = 4.0, momentum: float = 0.9, counts=None):
        rows = np.array(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] < 2:
            raise ValueError(f"rows must be a (C, C) matrix with C >= 2 classes, got {rows.shape}")
        _check_probs(rows)
        if not np.isfinite(temperature) or temperature <= 0:
            raise ValueError(f"temperature must be positive, got {temperature}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
        self.rows = rows
        self.temperature = float(temperature)
        self.momentum = float(momentum)
        self.counts = np.zeros(rows.shape[0], dtype=np.int64) if counts is None else np.array(counts, dtype=np.int64)
        if self.counts.shape != (rows.shape[0],):
            raise ValueError("counts must have one entry per class")

    @property
    def num_classes(self) -> int:
        return self.rows.shape[0]

    @classmethod
    def uniform(cls, num_classes: int, temperature: float = 4.0, momentum: float = 0.9) -> "ClassStats":
        """Fresh table with every row at 1/C."""
        if num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {num_classes}")
        rows = np.full((num_classes, num_classes), 1.0 / num_classes)
        return cls(rows, temperature, momentum)

    def _check_labels(self, labels, batch: int) -> np.ndarray:
        y = np.asarray(labels)
        if y.shape != (batch,):
            raise ValueError(f"labels must have shape ({batch},), got {y.shape}")
        if np.any(y < 0) or np.any(y >= self.num_classes):
            raise ValueError(f"label out of range [0, {self.num_classes})")
        return y.astype(np.int64)

    def update(self, logits, labels) -> "ClassStats":
        """Absorb one batch; classes absent from the batch keep their row."""
        o = np.asarray(logits, dtype=np.float64)
        if o.ndim != 2 or o.shape[1] != self.num_classes:
            raise ValueError(f"logits must be (B, {self.num_classes}), got {o.shape}")
        y = self._check_labels(labels, o.shape[0])
        probs = softmax(o, self.temperature)
        for cls_idx in np.unique(y):
            mask = y == cls_idx
            mean = probs[mask].mean(axis=0)
            row = (1.0 - self.momentum) * mean + self.momentum * self.rows[cls_idx]
            self.rows[cls_idx] = row / row.sum()
            self.counts[cls_idx] += int(mask.sum())
        return self

    def weight_matrix(self, label: int) -> np.ndarray:
        """Pair-weight matrix outer(rows[label])."""
        return outer_weight(self.rows[self._index(label)])

    def margin(self, label: int) -> float:
        """Own-class mean score minus the best competing one, in [-1, 1]."""
        y = self._index(label)
        row = self.rows[y]
        others = np.delete(row, y)
        return float(row[y] - others.max())

    def margins(self) -> np.ndarray:
        return np.array([self.margin(y) for y in range(self.num_classes)])

    def _index(self, label: int) -> int:
        y = int(label)
        if not 0 <= y < self.num_classes:
            raise ValueError(f"label out of range [0, {self.num_classes})")
        return y

    def save(self, path) -> None:
        """Plain-text table: meta comments, then one probability row per class."""
        lines = [
            "# class-stats v1",
            f"# temperature {self.temperature!r}",
            f"# momentum {self.momentum!r}",
            "# counts " + " ".join(str(int(c)) for c in self.counts),
        ]
        for row in self.rows:
            lines.append(" ".join(repr(float(v)) for v in row))
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "ClassStats":
        temperature, momentum, counts = 1.0, 0.9, None
        rows = []
        with open(path, "r", encoding="utf-8") as fh:
            for raw in fh:
                line = raw.strip()
                if not line:
                    continue
                if line.startswith("#"):
                    parts = line[1:].split()
                    if len(parts) >= 2 and parts[0] == "temperature":
                        temperature = float(parts[1])
                    elif len(parts) >= 2 and parts[0] == "momentum":
                        momentum = float(parts[1])
                    elif parts and parts[0] == "counts":
                        counts = [int(v) for v in parts[1:]]
                    continue
                rows.append([float(v) for v in line.split()])
        return cls(np.array(rows), temperature, momentum, counts)


def exact_recompute(logits, labels, num_classes: int, temperature: float = 4.0,
                    momentum: float = 0.9) -> ClassStats:
    """Table built from the literal per-class mean over a full dataset.

    Every class must be represented; the result is independent of sample
    order. Used for tests, end-of-run refreshes, and fixed teachers.
    """
    o = np.asarray(logits, dtype=np.float64)
    if o.ndim != 2 or o.shape[1] != num_classes:
        raise ValueError(f"logits must be (N, {num_classes}), got {o.shape}")
    y = np.asarray(labels)
    if y.shape != (o.shape[0],):
        raise ValueError(f"labels must have shape ({o.shape[0]},), got {y.shape}")
    if np.any(y < 0) or np.any(y >= num_classes):
        raise ValueError(f"label out of range [0, {num_classes})")
    probs = softmax(o, temperature)
    rows = np.empty((num_classes, num_classes))
    counts = np.empty(num_classes, dtype=np.int64)
    for cls_idx in range(num_classes):
        mask = y == cls_idx
        if not np.any(mask):
            raise ValueError(f"class {cls_idx} has no samples")
        rows[cls_idx] = probs[mask].mean(axis=0)
        counts[cls_idx] = int(mask.sum())
    return ClassStats(rows, temperature, momentum, counts)
