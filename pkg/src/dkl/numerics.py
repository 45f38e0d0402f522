"""Numerically stable softmax-family kernels shared by all losses.

Everything here is a pure function of float64 arrays. The class axis is
always the last one, so a single logit vector and a batch of logit rows
both work. Safe for concurrent use from any number of threads.
"""
from __future__ import annotations

import numpy as np

__all__ = ["softmax", "log_softmax", "pairwise_diff", "outer_weight"]


def _check_logits(logits) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] < 2:
        raise ValueError(f"need a class axis with at least 2 entries, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("logits must be finite")
    return x


def _check_temperature(temperature) -> float:
    t = float(temperature)
    if not np.isfinite(t) or t <= 0.0:
        raise ValueError(f"temperature must be a positive real, got {temperature!r}")
    return t


def _check_probs(probs, atol: float = 1e-8) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim == 0 or p.shape[-1] < 2:
        raise ValueError(f"need a class axis with at least 2 entries, got shape {p.shape}")
    if not np.all(np.isfinite(p)) or np.any(p < -1e-12):
        raise ValueError("probabilities must be finite and nonnegative")
    sums = p.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > atol):
        raise ValueError(f"probabilities must sum to 1, got sums in [{sums.min()}, {sums.max()}]")
    return p


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    """Softmax along the last axis with max-subtraction for stability.

    The temperature divides the logits before the max shift, i.e.
    softmax(o, t) == softmax(o / t, 1).
    """
    x = _check_logits(logits) / _check_temperature(temperature)
    x = x - x.max(axis=-1, keepdims=True)
    ex = np.exp(x)
    return ex / ex.sum(axis=-1, keepdims=True)


def log_softmax(logits, temperature: float = 1.0) -> np.ndarray:
    """Log of softmax, accurate even when one class dominates.

    The normalizer is evaluated as log1p(sum of the non-max exponentials),
    so the entry of the dominating class keeps its tiny negative magnitude
    instead of collapsing to exactly 0. exp() of the result reproduces
    softmax() to well below 1e-12.
    """
    x = _check_logits(logits) / _check_temperature(temperature)
    x = x - x.max(axis=-1, keepdims=True)
    ex = np.exp(x)
    flat = ex.reshape(-1, x.shape[-1])
    rows = np.arange(flat.shape[0])
    flat[rows, x.reshape(flat.shape).argmax(axis=-1)] = 0.0
    tail = flat.sum(axis=-1).reshape(x.shape[:-1] + (1,))
    return x - np.log1p(tail)


def pairwise_diff(logits) -> np.ndarray:
    """All pairwise logit gaps: out[..., j, k] = o[..., j] - o[..., k].

    Antisymmetric with an exactly zero diagonal by construction.
    """
    x = _check_logits(logits)
    return x[..., :, None] - x[..., None, :]


def outer_weight(probs) -> np.ndarray:
    """Rank-one pair weights w[..., j, k] = p[..., j] * p[..., k].

    Symmetric and nonnegative; sums to 1 over (j, k) when p sums to 1.
    """
    p = _check_probs(probs)
    return p[..., :, None] * p[..., None, :]
