"""Dense vs. memory-efficient wMSE benchmark: values, time, allocations."""
from __future__ import annotations

import time
import tracemalloc

import numpy as np

from .losses import wmse_dense, wmse_efficient, wmse_efficient_values
from .numerics import outer_weight, softmax

__all__ = ["bench_wmse"]


def _peak_bytes(fn) -> int:
    tracemalloc.start()
    try:
        baseline = tracemalloc.get_traced_memory()[0]
        tracemalloc.reset_peak()
        fn()
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return max(0, peak - baseline)


def _best_time(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_wmse(class_counts=(2, 100, 1000), batch: int = 64, repeats: int = 3,
               seed: int = 0, tolerance: float = 1e-10) -> tuple[list[str], bool]:
    """Per class count: dense/efficient equality, wall time, peak transient
    allocation of the value paths, and the O(B*C) budget assertion
    (efficient peak <= 2*B*C doubles plus a small fixed slack).

    The dense reference shrinks its batch for large C so the comparison
    stays cheap; the efficient path always runs at the full batch.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    lines: list[str] = []
    passed = True
    for c in class_counts:
        b_dense = max(1, min(batch, 4_000_000 // (c * c)))
        o_m = rng.standard_normal((batch, c))
        o_n = rng.standard_normal((batch, c))
        scores = softmax(rng.standard_normal((batch, c)))

        dense = wmse_dense(o_m[:b_dense], o_n[:b_dense], outer_weight(scores[:b_dense]))
        eff = wmse_efficient(o_m[:b_dense], o_n[:b_dense], scores[:b_dense])
        value_diff = abs(eff.value - dense.value) / (1.0 + abs(dense.value))
        grad_diff = float(max(np.abs(b_dense * (eff.grad_m - dense.grad_m)).max(),
                              np.abs(b_dense * (eff.grad_n - dense.grad_n)).max()))

        eff_time = _best_time(lambda: wmse_efficient_values(o_m, o_n, scores), repeats)
        dense_time = _best_time(
            lambda: wmse_dense(o_m[:b_dense], o_n[:b_dense], outer_weight(scores[:b_dense]),
                               flow_m=False, flow_n=False), repeats)

        eff_peak = _peak_bytes(lambda: wmse_efficient_values(o_m, o_n, scores))
        dense_peak = _peak_bytes(
            lambda: wmse_dense(o_m[:b_dense], o_n[:b_dense], outer_weight(scores[:b_dense]),
                               flow_m=False, flow_n=False))
        budget = 2 * batch * c * 8 + 65536
        ok = value_diff <= tolerance and grad_diff <= tolerance and eff_peak <= budget
        passed = passed and ok

        lines += [
            f"[wmse_bench C={c}]",
            f"batch {batch}",
            f"dense_batch {b_dense}",
            f"value_diff {value_diff:.6e}",
            f"grad_diff {grad_diff:.6e}",
            f"tolerance {tolerance:.6e}",
            f"efficient_time_s {eff_time:.6e}",
            f"dense_time_s {dense_time:.6e}",
            f"efficient_peak_bytes {eff_peak}",
            f"dense_peak_bytes {dense_peak}",
            f"budget_bytes {budget}",
            f"passed {'true' if ok else 'false'}",
            "",
        ]
    return lines, passed
