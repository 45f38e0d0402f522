"""Independent numerical oracles for the analytic loss gradients.

Three kinds of certificates:

  * central finite differences against every loss's closed-form gradient,
    with the stop-gradient structure of a loss frozen into the evaluated
    objective (a detached quantity is held at its base value while the
    live side is perturbed);
  * the KL / decoupled-KL gradient equivalence, comparing the literal
    pairwise KL gradient against the decoupled kernel's gradients over
    random inputs;
  * the dense vs. memory-efficient wMSE identity.

All checks are deterministic given (seed, trials, class counts); trials
are independent, and reports aggregate by max/mean, so ordering does not
matter. FD discrepancies are reported as max|analytic - fd| / (1 + max|fd|)
so near-zero gradients do not blow up a ratio; equivalence checks report
plain max absolute differences of per-sample (batch-unreduced) gradients.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import (
    LossConfig,
    WeightSource,
    dkl_family,
    jsd_forward_backward,
    kl_backward,
    kl_forward,
    soft_ce,
    wmse_dense,
    wmse_efficient,
    wmse_efficient_values,
)
from .numerics import outer_weight, softmax

__all__ = [
    "GradReport",
    "finite_diff",
    "check_kl_dkl_equivalence",
    "check_asymmetry",
    "check_finite_differences",
    "check_wmse_identity",
]

# Logit scales swept by every randomized check: soft, moderate, and a
# saturated regime where probabilities underflow and finite differences
# degrade.
SCALES = (0.1, 1.0, 5.0)


@dataclass
class GradReport:
    """Aggregate outcome of one gradient certificate."""

    name: str
    trials: int
    class_counts: tuple[int, ...]
    max_abs_diff: float
    mean_abs_diff: float
    tolerance: float
    worst_case: str | None = None

    @property
    def passed(self) -> bool:
        return bool(self.max_abs_diff <= self.tolerance)

    def lines(self) -> list[str]:
        out = [
            f"[{self.name}]",
            f"trials {self.trials}",
            "class_counts " + ",".join(str(c) for c in self.class_counts),
            f"max_abs_diff {self.max_abs_diff:.6e}",
            f"mean_abs_diff {self.mean_abs_diff:.6e}",
            f"tolerance {self.tolerance:.6e}",
            f"passed {'true' if self.passed else 'false'}",
        ]
        if self.worst_case is not None:
            out.append(f"worst_case {self.worst_case}")
        return out


@dataclass
class _Agg:
    """Streaming max/mean accumulator with the worst input remembered."""

    max_abs: float = 0.0
    total: float = 0.0
    count: int = 0
    worst: str | None = None

    def add(self, diff: np.ndarray, describe=None) -> None:
        d = np.abs(np.asarray(diff))
        local = float(d.max()) if d.size else 0.0
        if local > self.max_abs:
            self.max_abs = local
            if describe is not None:
                self.worst = describe()
        self.total += float(d.sum())
        self.count += d.size

    @property
    def mean_abs(self) -> float:
        return self.total / self.count if self.count else 0.0


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def finite_diff(loss_evaluator, o_m, o_n, side: str = "m", h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of loss_evaluator(o_m, o_n) in one side.

    The chosen side is perturbed one entry at a time by +-h; the evaluator
    must be deterministic and return a finite scalar.
    """
    if h <= 0:
        raise ValueError(f"step h must be positive, got {h}")
    if side not in ("m", "n"):
        raise ValueError(f"side must be 'm' or 'n', got {side!r}")
    base_m = np.array(o_m, dtype=np.float64, copy=True)
    base_n = np.array(o_n, dtype=np.float64, copy=True)
    var = base_m if side == "m" else base_n
    grad = np.empty_like(var)
    for idx in np.ndindex(var.shape):
        keep = var[idx]
        var[idx] = keep + h
        hi = loss_evaluator(base_m, base_n)
        var[idx] = keep - h
        lo = loss_evaluator(base_m, base_n)
        var[idx] = keep
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise ValueError(f"loss evaluator returned a non-finite value near index {idx}")
        grad[idx] = (hi - lo) / (2.0 * h)
    return grad


def _fd_rel_diff(analytic: np.ndarray, fd: np.ndarray) -> float:
    return float(np.abs(analytic - fd).max() / (1.0 + np.abs(fd).max()))


def check_kl_dkl_equivalence(trials: int = 1000, class_counts=(2, 5, 10, 100), seed: int = 0,
                             tolerance: float = 1e-10) -> GradReport:
    """Compare KL gradients against the decoupled family at alpha=beta=1.

    Per trial, a random logits pair is drawn and both gradient routes are
    evaluated; the report carries the max/mean absolute discrepancy of the
    per-sample gradients over all trials and class counts.
    """
    if tolerance < 0:
        raise ValueError("tolerance must be nonnegative")
    rng = _rng(seed)
    cfg = LossConfig(alpha=1.0, beta=1.0)
    agg = _Agg()
    chunk = 250
    for c in class_counts:
        done = 0
        while done < trials:
            b = min(chunk, trials - done)
            scale = SCALES[(done // chunk) % len(SCALES)]
            o_m = scale * rng.standard_normal((b, c))
            o_n = scale * rng.standard_normal((b, c))
            ref = kl_backward(o_m, o_n)
            out = dkl_family(o_m, o_n, cfg)
            diff_m = b * (out.grad_m - ref.grad_m)
            diff_n = b * (out.grad_n - ref.grad_n)

            def describe(c=c, scale=scale, diff_m=diff_m, diff_n=diff_n, o_m=o_m, o_n=o_n):
                stacked = np.abs(np.stack([diff_m, diff_n]))
                _, row, _ = np.unravel_index(int(stacked.argmax()), stacked.shape)
                return (f"C={c} scale={scale} o_m={o_m[row].tolist()} o_n={o_n[row].tolist()}")

            agg.add(diff_m, describe)
            agg.add(diff_n, describe)
            done += b
    worst = agg.worst if agg.max_abs > tolerance else None
    return GradReport("kl_dkl_equivalence", trials, tuple(class_counts),
                      agg.max_abs, agg.mean_abs, tolerance, worst)


def check_asymmetry(trials: int = 200, seed: int = 0, tolerance: float = 1e-10,
                    cancel_tolerance: float = 1e-12) -> list[GradReport]:
    """Certify the gradient routing of the detached / asymmetric variants.

    (a) detached teacher, no break: grad_n is the pure CE gradient and
        grad_m vanishes;
    (b) detached teacher with break: grad_n gains exactly the pairwise
        wMSE term alpha * sum_k w[j,k] (dn - dm)[j,k], evaluated here as a
        literal dense sum independent of the efficient kernel;
    (c) both sides flowing: the wMSE parts of grad_m and grad_n cancel
        exactly (checked at 1e-12).
    """
    rng = _rng(seed)
    counts = (2, 5, 10)
    alpha, beta = 1.5, 0.75
    agg_a, agg_b, agg_c = _Agg(), _Agg(), _Agg()
    for trial in range(trials):
        c = counts[trial % len(counts)]
        scale = SCALES[(trial // len(counts)) % len(SCALES)]
        b = 4
        o_m = scale * rng.standard_normal((b, c))
        o_n = scale * rng.standard_normal((b, c))
        s_m = softmax(o_m)
        s_n = softmax(o_n)
        ce_grad = beta * (s_n - s_m) / b
        gaps = np.asarray(o_n)[:, :, None] - np.asarray(o_n)[:, None, :] \
            - (np.asarray(o_m)[:, :, None] - np.asarray(o_m)[:, None, :])
        wmse_grad_n = alpha * np.einsum("bjk,bjk->bj", outer_weight(s_m), gaps) / b

        out_a = dkl_family(o_m, o_n, LossConfig(alpha, beta, detach_m=True))
        agg_a.add(out_a.grad_n - ce_grad)
        agg_a.add(out_a.grad_m)

        out_b = dkl_family(o_m, o_n, LossConfig(alpha, beta, detach_m=True, break_asymmetry=True))
        agg_b.add(out_b.grad_n - (ce_grad + wmse_grad_n))

        out_c = dkl_family(o_m, o_n, LossConfig(alpha, beta, break_asymmetry=True))
        agg_c.add(out_c.grad_m + (out_c.grad_n - ce_grad))
    return [
        GradReport("asymmetry_detached_ce_only", trials, counts, agg_a.max_abs, agg_a.mean_abs, tolerance),
        GradReport("asymmetry_break_term", trials, counts, agg_b.max_abs, agg_b.mean_abs, tolerance),
        GradReport("asymmetry_two_sided_cancel", trials, counts, agg_c.max_abs, agg_c.mean_abs,
                   cancel_tolerance),
    ]


def _build_kl(rng, b, c, scale):
    o_m = scale * rng.standard_normal((b, c))
    o_n = scale * rng.standard_normal((b, c))
    out = kl_backward(o_m, o_n)
    return o_m, o_n, kl_forward, out.grad_m, out.grad_n


def _build_jsd(rng, b, c, scale):
    o_m = scale * rng.standard_normal((b, c))
    o_n = scale * rng.standard_normal((b, c))
    out = jsd_forward_backward(o_m, o_n)
    return o_m, o_n, (lambda m, n: jsd_forward_backward(m, n).value), out.grad_m, out.grad_n


def _build_soft_ce(rng, b, c, scale):
    o_n = scale * rng.standard_normal((b, c))
    targets = softmax(scale * rng.standard_normal((b, c)))
    out = soft_ce(o_n, targets)
    return o_n, o_n, (lambda m, n: soft_ce(n, targets).value), None, out.grad_n


def _build_wmse_dense(rng, b, c, scale):
    o_m = scale * rng.standard_normal((b, c))
    o_n = scale * rng.standard_normal((b, c))
    weights = outer_weight(softmax(scale * rng.standard_normal((b, c))))
    out = wmse_dense(o_m, o_n, weights)
    evaluator = lambda m, n: wmse_dense(m, n, weights, flow_m=False, flow_n=False).value
    return o_m, o_n, evaluator, out.grad_m, out.grad_n


def _build_wmse_efficient(rng, b, c, scale):
    o_m = scale * rng.standard_normal((b, c))
    o_n = scale * rng.standard_normal((b, c))
    scores = softmax(scale * rng.standard_normal((b, c)))
    out = wmse_efficient(o_m, o_n, scores)
    evaluator = lambda m, n: float(wmse_efficient_values(m, n, scores).mean())
    return o_m, o_n, evaluator, out.grad_m, out.grad_n


def _dkl_builder(cfg: LossConfig):
    def build(rng, b, c, scale):
        o_m = scale * rng.standard_normal((b, c))
        o_n = scale * rng.standard_normal((b, c))
        labels = rng.integers(0, c, size=b)
        if cfg.weight_source is WeightSource.CLASS_WISE:
            stats = softmax(scale * rng.standard_normal((c, c)))
            scores = stats[labels]
        else:
            stats = None
            scores = softmax(o_m)
        targets = softmax(o_m)
        out = dkl_family(o_m, o_n, cfg, labels=labels, stats=stats)

        # Frozen objectives: weights, pairwise reference gaps, and CE
        # targets are pinned at the base point, matching the loss's
        # stop-gradient placement, so FD probes only the live paths.
        def eval_m(m, n, scores=scores, targets=targets, base_n=np.array(o_n)):
            v = cfg.beta * soft_ce(base_n, targets).value
            if not cfg.detach_m:
                v += cfg.alpha * float(wmse_efficient_values(m, base_n, scores).mean())
            return v

        def eval_n(m, n, scores=scores, targets=targets, base_m=np.array(o_m)):
            v = cfg.beta * soft_ce(n, targets).value
            if cfg.break_asymmetry:
                v += cfg.alpha * float(wmse_efficient_values(base_m, n, scores).mean())
            return v

        return o_m, o_n, (eval_m, eval_n), out.grad_m, out.grad_n

    return build


_FD_CASES = [
    ("kl", _build_kl),
    ("soft_ce", _build_soft_ce),
    ("wmse_dense", _build_wmse_dense),
    ("wmse_efficient", _build_wmse_efficient),
    ("dkl", _dkl_builder(LossConfig())),
    ("dkl_detached", _dkl_builder(LossConfig(detach_m=True))),
    ("dkl_detached_break", _dkl_builder(LossConfig(detach_m=True, break_asymmetry=True))),
    ("dkl_two_sided", _dkl_builder(LossConfig(break_asymmetry=True))),
    ("ikl", _dkl_builder(LossConfig(alpha=2.0, beta=0.5, break_asymmetry=True,
                                    weight_source=WeightSource.CLASS_WISE))),
    ("jsd", _build_jsd),
]


def check_finite_differences(class_counts=(2, 5, 10, 100), seed: int = 0, batch: int = 2,
                             h: float = 1e-5, soft_tol: float = 1e-5,
                             saturated_tol: float = 1e-4) -> list[GradReport]:
    """FD-verify every loss's analytic gradients, both sides.

    Produces two reports per loss: the soft regime (logit scales 0.1 and
    1.0, tolerance soft_tol) and the saturated regime (scale 5.0, relaxed
    to saturated_tol because finite differences degrade once probabilities
    underflow). Discrepancies are relative: max|a - fd| / (1 + max|fd|).
    """
    reports = []
    for name, build in _FD_CASES:
        rng = _rng(seed)
        for regime, scales, tol in (("soft", (0.1, 1.0), soft_tol),
                                    ("saturated", (5.0,), saturated_tol)):
            agg = _Agg()
            trials = 0
            for c in class_counts:
                for scale in scales:
                    got = build(rng, batch, c, scale)
                    o_m, o_n, evaluator, grad_m, grad_n = got
                    if isinstance(evaluator, tuple):
                        eval_m, eval_n = evaluator
                    else:
                        eval_m = eval_n = evaluator
                    trials += 1
                    if grad_m is not None:
                        fd_m = finite_diff(eval_m, o_m, o_n, side="m", h=h)
                        agg.add(np.array([_fd_rel_diff(grad_m, fd_m)]))
                    if grad_n is not None:
                        fd_n = finite_diff(eval_n, o_m, o_n, side="n", h=h)
                        agg.add(np.array([_fd_rel_diff(grad_n, fd_n)]))
            reports.append(GradReport(f"fd_{name}_{regime}", trials, tuple(class_counts),
                                      agg.max_abs, agg.mean_abs, tol))
    return reports


def check_wmse_identity(class_counts=(2, 10, 100, 1000), seed: int = 0,
                        tolerance: float = 1e-10) -> GradReport:
    """Dense vs. memory-efficient wMSE: same values and gradients.

    Values are compared relative to the dense result; gradients are
    compared per sample (batch factor removed). Batch sizes shrink as C
    grows so the dense reference stays cheap.
    """
    rng = _rng(seed)
    agg = _Agg()
    trials = 0
    for c in class_counts:
        b = max(1, min(8, 4_000_000 // (c * c)))
        for scale in SCALES:
            o_m = scale * rng.standard_normal((b, c))
            o_n = scale * rng.standard_normal((b, c))
            scores = softmax(scale * rng.standard_normal((b, c)))
            dense = wmse_dense(o_m, o_n, outer_weight(scores))
            eff = wmse_efficient(o_m, o_n, scores)
            agg.add(np.array([abs(eff.value - dense.value) / (1.0 + abs(dense.value))]))
            agg.add(b * (eff.grad_m - dense.grad_m))
            agg.add(b * (eff.grad_n - dense.grad_n))
            trials += 1
    return GradReport("wmse_identity", trials, tuple(class_counts),
                      agg.max_abs, agg.mean_abs, tolerance)
