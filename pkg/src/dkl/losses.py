"""Divergence losses with closed-form gradients.

Implements the KL loss and its decoupled re-expression as a weighted MSE
over pairwise logit gaps plus a soft-label cross-entropy, together with
the variants obtained by re-routing the stop-gradients (detached teacher,
broken asymmetry, class-wise pair weights) and a Jensen-Shannon loss for
comparison.

Every function reduces the batch by its mean, so the returned gradients
are gradients of the reported scalar and carry a 1/B factor. A per-sample
gradient row always sums to 0 (softmax ignores per-sample logit shifts).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .numerics import _check_probs, log_softmax, pairwise_diff, softmax

__all__ = [
    "WeightSource",
    "LossConfig",
    "LossOutput",
    "kl_forward",
    "kl_backward",
    "wmse_dense",
    "wmse_efficient",
    "wmse_efficient_values",
    "soft_ce",
    "dkl_family",
    "jsd_forward_backward",
]


class WeightSource(enum.Enum):
    """Where the wMSE pair weights come from."""

    SAMPLE_WISE = "sample"
    CLASS_WISE = "class"


@dataclass(frozen=True)
class LossConfig:
    """Knobs of the decoupled loss family.

    alpha weighs the wMSE term (the forward prefactor is alpha/4, the
    quarter living inside the wMSE kernel). beta weighs the soft-label
    cross-entropy and scales its whole gradient, beta * (s_n - s_m).
    detach_m treats o_m as a constant (fixed-teacher case); break_asymmetry
    lets the wMSE term push gradient into o_n as well.
    """

    alpha: float = 1.0
    beta: float = 1.0
    detach_m: bool = False
    break_asymmetry: bool = False
    weight_source: WeightSource = WeightSource.SAMPLE_WISE

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"alpha and beta must be nonnegative, got {self.alpha}, {self.beta}")


@dataclass
class LossOutput:
    """Scalar loss (batch mean) and its gradients for both logits inputs.

    A side that does not receive gradient (detached, or absent from the
    loss) gets a zero-filled matrix.
    """

    value: float
    grad_m: np.ndarray
    grad_n: np.ndarray


def _as_batch(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] < 2:
        raise ValueError(f"{name} must be a (B, C) matrix with C >= 2, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} must be finite")
    return a


def _pair_batches(o_m, o_n) -> tuple[np.ndarray, np.ndarray]:
    m = _as_batch(o_m, "o_m")
    n = _as_batch(o_n, "o_n")
    if m.shape != n.shape:
        raise ValueError(f"logits shapes differ: {m.shape} vs {n.shape}")
    return m, n


def kl_forward(o_m, o_n) -> float:
    """Mean over the batch of sum_j s_m^j * (log s_m^j - log s_n^j)."""
    m, n = _pair_batches(o_m, o_n)
    lp_m = log_softmax(m)
    lp_n = log_softmax(n)
    per = (np.exp(lp_m) * (lp_m - lp_n)).sum(axis=1)
    return float(per.mean())


def kl_backward(o_m, o_n) -> LossOutput:
    """KL loss with its analytic gradients.

    grad_n rows simplify to (s_n - s_m). grad_m rows are the pairwise form
    sum_k (dm[j,k] - dn[j,k]) * s_m^j * s_m^k with dm, dn the pairwise
    logit gaps; it is evaluated literally, which doubles as an independent
    reference for the decoupled family.
    """
    m, n = _pair_batches(o_m, o_n)
    s_m = softmax(m)
    s_n = softmax(n)
    b = m.shape[0]
    gaps = pairwise_diff(m) - pairwise_diff(n)
    grad_m = np.einsum("bjk,bj,bk->bj", gaps, s_m, s_m) / b
    grad_n = (s_n - s_m) / b
    return LossOutput(kl_forward(m, n), grad_m, grad_n)


def _check_weights(weights, shape: tuple[int, int, int]) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 2:
        w = np.broadcast_to(w, shape)
    if w.shape != shape:
        raise ValueError(f"weights must have shape {shape} or {shape[1:]}, got {w.shape}")
    if not np.all(np.isfinite(w)) or np.any(w < -1e-12):
        raise ValueError("weights must be finite and nonnegative")
    asym = np.abs(w - np.swapaxes(w, -1, -2)).max()
    if asym > 1e-12:
        raise ValueError(f"weight matrices must be symmetric, max |w - w^T| = {asym}")
    return w


def wmse_dense(o_m, o_n, weights, flow_m: bool = True, flow_n: bool = True) -> LossOutput:
    """Weighted MSE over all pairwise logit gaps, dense O(C^2) evaluation.

    value = mean_b (1/4) * sum_{j,k} w[b,j,k] * (dm[b,j,k] - dn[b,j,k])^2.
    The quarter prefactor lives here; callers apply their own weight on
    top. flow_m / flow_n choose which side receives gradient (a disabled
    side mirrors a stop-gradient on its pairwise gaps and gets zeros);
    when both flow, grad_m == -grad_n by antisymmetry of the residual.
    """
    m, n = _pair_batches(o_m, o_n)
    w = _check_weights(weights, (m.shape[0], m.shape[1], m.shape[1]))
    gaps = pairwise_diff(m) - pairwise_diff(n)
    per = 0.25 * np.einsum("bjk,bjk->b", w, gaps * gaps)
    b = m.shape[0]
    g = np.einsum("bjk,bjk->bj", w, gaps) / b
    grad_m = g if flow_m else np.zeros_like(m)
    grad_n = -g if flow_n else np.zeros_like(m)
    return LossOutput(float(per.mean()), grad_m, grad_n)


def _check_scores(class_scores, shape: tuple[int, int]) -> np.ndarray:
    c = np.asarray(class_scores, dtype=np.float64)
    if c.ndim == 1:
        c = c[None, :]
    if c.shape != shape:
        raise ValueError(f"class scores must have shape {shape}, got {c.shape}")
    return _check_probs(c)


def wmse_efficient_values(o_m, o_n, class_scores) -> np.ndarray:
    """Per-sample wMSE values for rank-one pair weights outer(c), O(C) memory.

    For normalized scores c the dense pair sum collapses to a weighted
    variance of the per-class logit gaps d = o_m - o_n:

        (1/4) * sum_{j,k} c_j c_k (d_j - d_k)^2 = (1/2) * Var_c(d)

    evaluated in centered two-pass form, so the result is nonnegative and
    the only transient buffers are two (B, C) arrays.
    """
    m, n = _pair_batches(o_m, o_n)
    c = _check_scores(class_scores, m.shape)
    d = m - n
    t = c * d
    np.subtract(d, t.sum(axis=1)[:, None], out=d)
    np.multiply(c, d, out=t)
    return 0.5 * np.einsum("bc,bc->b", t, d)


def wmse_efficient(o_m, o_n, class_scores, flow_m: bool = True, flow_n: bool = True) -> LossOutput:
    """wMSE with pair weights outer(class_scores), without forming them.

    Matches wmse_dense(o_m, o_n, outer_weight(class_scores)) in value and
    gradients while touching only (B, C) buffers. class_scores rows must
    be normalized; the collapsed form relies on them summing to 1.
    """
    m, n = _pair_batches(o_m, o_n)
    c = _check_scores(class_scores, m.shape)
    b = m.shape[0]
    d = m - n
    t = c * d
    np.subtract(d, t.sum(axis=1)[:, None], out=d)
    np.multiply(c, d, out=t)
    value = float((0.5 * np.einsum("bc,bc->b", t, d)).mean())
    if flow_m or flow_n:
        np.multiply(t, 1.0 / b, out=t)
    if flow_m:
        grad_m = t
        grad_n = -t if flow_n else np.zeros_like(m)
    else:
        grad_m = np.zeros_like(m)
        grad_n = np.negative(t, out=t) if flow_n else np.zeros_like(m)
    return LossOutput(value, grad_m, grad_n)


def soft_ce(o_n, target_probs) -> LossOutput:
    """Cross-entropy of softmax(o_n) against fixed target distributions.

    Targets are constants for gradient purposes; grad_n rows are
    (s_n - target) / B and grad_m is identically zero.
    """
    n = _as_batch(o_n, "o_n")
    t = np.asarray(target_probs, dtype=np.float64)
    if t.ndim == 1:
        t = t[None, :]
    if t.shape != n.shape:
        raise ValueError(f"targets must match logits shape {n.shape}, got {t.shape}")
    t = _check_probs(t)
    per = -(t * log_softmax(n)).sum(axis=1)
    grad_n = (softmax(n) - t) / n.shape[0]
    return LossOutput(float(per.mean()), np.zeros_like(n), grad_n)


def _class_rows(stats, labels, shape: tuple[int, int]) -> np.ndarray:
    if stats is None:
        raise ValueError("class-wise weights need a class-stats table")
    if labels is None:
        raise ValueError("class-wise weights need ground-truth labels")
    rows = np.asarray(getattr(stats, "rows", stats), dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] != shape[1]:
        raise ValueError(f"stats rows must be (num_classes, {shape[1]}), got {rows.shape}")
    y = np.asarray(labels)
    if y.shape != (shape[0],):
        raise ValueError(f"labels must have shape ({shape[0]},), got {y.shape}")
    if np.any(y < 0) or np.any(y >= rows.shape[0]):
        raise ValueError(f"label out of range [0, {rows.shape[0]})")
    return rows[y]


def dkl_family(o_m, o_n, cfg: LossConfig = LossConfig(), labels=None, stats=None) -> LossOutput:
    """Decoupled KL family: alpha * wMSE + beta * soft-label cross-entropy.

    The stop-gradient placement decides the routing:

      * the CE target softmax(o_m) is always a constant, so the CE term
        only drives grad_n, as beta * (s_n - s_m);
      * the wMSE term drives grad_m unless detach_m;
      * the wMSE term drives grad_n only with break_asymmetry;
      * pair weights are outer(softmax(o_m)) per sample, or outer of the
        stored class-mean row of each sample's label for CLASS_WISE.

    With alpha = beta = 1, sample-wise weights and full flow, the
    gradients coincide with kl_backward's. The reported value follows the
    decomposition literally (the CE term keeps the entropy of s_m), so it
    differs from the KL value even though the gradients match.
    """
    m, n = _pair_batches(o_m, o_n)
    s_m = softmax(m)
    if cfg.weight_source is WeightSource.CLASS_WISE:
        scores = _class_rows(stats, labels, m.shape)
    else:
        scores = s_m
    wout = wmse_efficient(m, n, scores, flow_m=not cfg.detach_m, flow_n=cfg.break_asymmetry)
    ce = soft_ce(n, s_m)
    value = cfg.alpha * wout.value + cfg.beta * ce.value
    grad_m = cfg.alpha * wout.grad_m
    grad_n = cfg.alpha * wout.grad_n + cfg.beta * ce.grad_n
    return LossOutput(value, grad_m, grad_n)


def jsd_forward_backward(o_m, o_n) -> LossOutput:
    """Jensen-Shannon divergence with analytic gradients for both inputs.

    value = 0.5 * KL(P || M) + 0.5 * KL(Q || M) with M the even mixture of
    P = softmax(o_m) and Q = softmax(o_n); bounded by ln 2. The gradient
    in o_n has the same pairwise-gap structure as the wMSE gradient with
    weights (1/2) * s_n^i s_n^j and a virtual reference whose softmax
    equals M.
    """
    m, n = _pair_batches(o_m, o_n)
    lp = log_softmax(m)
    lq = log_softmax(n)
    p = np.exp(lp)
    q = np.exp(lq)
    mix = 0.5 * (p + q)
    with np.errstate(divide="ignore"):
        lmix = np.log(mix)
    gp = np.where(p > 0, lp - lmix, 0.0)
    gq = np.where(q > 0, lq - lmix, 0.0)
    per = 0.5 * ((p * gp).sum(axis=1) + (q * gq).sum(axis=1))
    b = m.shape[0]
    grad_m = 0.5 * p * (gp - (p * gp).sum(axis=1, keepdims=True)) / b
    grad_n = 0.5 * q * (gq - (q * gq).sum(axis=1, keepdims=True)) / b
    return LossOutput(float(per.mean()), grad_m, grad_n)
