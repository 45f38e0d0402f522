"""Acceptance gate: every criterion at its stated tolerance.

Each test prints one PASS/FAIL line. The desk-scale task everywhere is the
5-class ring mixture (D=8, 120 samples per class, spread 0.35) with the
default attack (epsilon 0.1, step 0.025, 10 iterations); total runtime of
the module stays far below the 15-minute budget.
"""
import json
import time
import tracemalloc
from dataclasses import replace

import numpy as np
import pytest

from dkl.class_stats import exact_recompute
from dkl.cli import main
from dkl.gradcheck import (
    check_asymmetry,
    check_finite_differences,
    check_kl_dkl_equivalence,
    check_wmse_identity,
)
from dkl.losses import wmse_efficient_values
from dkl.model import forward
from dkl.numerics import softmax
from dkl.trainers import (
    AttackConfig,
    TrainConfig,
    evaluate,
    make_dataset,
    train_adversarial,
    train_baseline,
    train_distill,
)

DESK = dict(classes=5, dim=8, n_per_class=120, spread=0.35, data_seed=1,
            epochs=12, batch_size=128, base_lr=0.5, hidden_dims=(32,),
            epsilon=0.1, attack_step=0.025, attack_iters=10)

SEEDS = (0, 1, 2, 3, 4)


def report(ok: bool, name: str, detail: str) -> bool:
    print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return ok


@pytest.fixture(scope="module")
def desk_models():
    """Five seeds of TRADES-KL and IKL-AT on the desk task."""
    runs = {}
    for loss, extra in (("kl", dict(alpha=1.0, beta=1.0)),
                        ("ikl", dict(alpha=4.0, beta=1.0))):
        per_seed = []
        for seed in SEEDS:
            cfg = TrainConfig(mode="adversarial", loss=loss, seed=seed, **DESK, **extra)
            train_ds, test_ds = make_dataset(cfg)
            params, metrics, stats = train_adversarial(cfg, train_ds, test_ds)
            per_seed.append((cfg, params, metrics, test_ds))
        runs[loss] = per_seed
    return runs


def test_kl_dkl_gradient_equivalence():
    t0 = time.perf_counter()
    rep = check_kl_dkl_equivalence(trials=1000, class_counts=(2, 5, 10, 100),
                                   seed=0, tolerance=1e-10)
    elapsed = time.perf_counter() - t0
    ok = rep.passed and elapsed < 10.0
    assert report(ok, "kl-dkl-equivalence",
                  f"max diff {rep.max_abs_diff:.3e} (tol 1e-10), {elapsed:.1f}s")


def test_gradient_oracle_suite():
    t0 = time.perf_counter()
    reports = check_finite_differences(class_counts=(2, 5, 10, 100), seed=0,
                                       h=1e-5, soft_tol=1e-5, saturated_tol=1e-4)
    elapsed = time.perf_counter() - t0
    worst = max(reports, key=lambda r: r.max_abs_diff / r.tolerance)
    ok = all(r.passed for r in reports) and elapsed < 30.0
    assert report(ok, "gradient-oracles",
                  f"{len(reports)} loss/regime checks, worst {worst.name} "
                  f"{worst.max_abs_diff:.3e} (tol {worst.tolerance:.0e}), {elapsed:.1f}s")


def test_wmse_efficient_identity_and_memory():
    t0 = time.perf_counter()
    rep = check_wmse_identity(class_counts=(2, 10, 100, 1000), seed=0, tolerance=1e-10)
    batch, classes = 64, 1000
    rng = np.random.default_rng(0)
    o_m = rng.standard_normal((batch, classes))
    o_n = rng.standard_normal((batch, classes))
    scores = softmax(rng.standard_normal((batch, classes)))
    tracemalloc.start()
    baseline = tracemalloc.get_traced_memory()[0]
    tracemalloc.reset_peak()
    wmse_efficient_values(o_m, o_n, scores)
    peak = tracemalloc.get_traced_memory()[1] - baseline
    tracemalloc.stop()
    budget = 2 * batch * classes * 8 + 65536
    elapsed = time.perf_counter() - t0
    ok = rep.passed and peak <= budget and elapsed < 10.0
    assert report(ok, "wmse-identity",
                  f"max diff {rep.max_abs_diff:.3e} (tol 1e-10), peak {peak} B "
                  f"<= {budget} B at B={batch} C={classes}, {elapsed:.1f}s")


def test_asymmetry_mechanics():
    reports = check_asymmetry(trials=300, seed=0, tolerance=1e-10, cancel_tolerance=1e-12)
    ok = all(r.passed for r in reports)
    detail = ", ".join(f"{r.name.split('_', 1)[1]} {r.max_abs_diff:.2e}" for r in reports)
    assert report(ok, "asymmetry-mechanics", detail)


def _metric_gap(a: list[dict], b: list[dict]) -> float:
    gap = 0.0
    for ra, rb in zip(a, b):
        assert ra.keys() == rb.keys()
        for key in ra:
            gap = max(gap, abs(ra[key] - rb[key]))
    return gap


def test_training_level_equivalence():
    cfg_base = dict(DESK, epochs=3)
    gaps = {}
    train_ds, test_ds = make_dataset(TrainConfig(mode="baseline", **cfg_base))
    teacher_params, _ = train_baseline(
        TrainConfig(mode="baseline", seed=77, **cfg_base | dict(epochs=12)), train_ds, test_ds)
    teacher = forward(teacher_params, train_ds.features)[0]
    kd = {loss: train_distill(TrainConfig(mode="distill", loss=loss, alpha=1.0, beta=1.0,
                                          seed=0, **cfg_base), train_ds, test_ds, teacher)[1]
          for loss in ("kl", "dkl")}
    gaps["kd"] = _metric_gap(kd["kl"], kd["dkl"])
    at = {loss: train_adversarial(TrainConfig(mode="adversarial", loss=loss, alpha=1.0,
                                              beta=1.0, seed=0, **cfg_base),
                                  train_ds, test_ds)[1]
          for loss in ("kl", "dkl")}
    gaps["adversarial"] = _metric_gap(at["kl"], at["dkl"])
    ok = all(g < 1e-6 for g in gaps.values())
    assert report(ok, "training-equivalence",
                  f"3-epoch metric gaps kd {gaps['kd']:.2e}, "
                  f"adversarial {gaps['adversarial']:.2e} (tol 1e-6)")


def _mean_test_margin(per_seed) -> float:
    margins = []
    for cfg, params, _, test_ds in per_seed:
        logits = forward(params, test_ds.features)[0]
        stats = exact_recompute(logits, test_ds.labels, test_ds.num_classes, temperature=1.0)
        margins.append(float(stats.margins().mean()))
    return float(np.mean(margins))


def test_margin_tendency(desk_models):
    ikl = _mean_test_margin(desk_models["ikl"])
    kl = _mean_test_margin(desk_models["kl"])
    ok = ikl >= kl
    assert report(ok, "margin-tendency",
                  f"IKL-AT mean margin {ikl:.4f} vs TRADES-KL {kl:.4f} over {len(SEEDS)} seeds")


def test_robustness_sanity(desk_models):
    eps0 = DESK["epsilon"]
    sweep = (0.0, 0.5 * eps0, eps0, 2.0 * eps0)
    ok = True
    curves = {}
    for loss, per_seed in desk_models.items():
        accs = np.zeros((len(per_seed), len(sweep)))
        for i, (cfg, params, _, test_ds) in enumerate(per_seed):
            clean = evaluate(params, test_ds)["clean_acc"]
            for j, eps in enumerate(sweep):
                atk = AttackConfig(eps, cfg.attack_step, cfg.attack_iters)
                accs[i, j] = evaluate(params, test_ds, atk, seed=1000 + i)["robust_acc"]
                ok = ok and accs[i, j] <= clean + 1e-12
            ok = ok and accs[i, 0] == clean
        mean = accs.mean(axis=0)
        curves[loss] = mean
        ok = ok and all(mean[j + 1] <= mean[j] + 0.01 for j in range(len(sweep) - 1))
    detail = "; ".join(f"{loss} " + "->".join(f"{v:.3f}" for v in curve)
                       for loss, curve in curves.items())
    assert report(ok, "robustness-sanity", f"eps {list(sweep)}: {detail}")


def test_manifest_determinism(tmp_path, capsys):
    config = tmp_path / "run.cfg"
    config.write_text("loss ikl\nepochs 3\nn_per_class 40\nseed 9\n")
    first = tmp_path / "first"
    again = tmp_path / "again"
    assert main(["train", "adversarial", "--config", str(config), "--out", str(first)]) == 0
    assert main(["train", "adversarial", "--config", str(first / "manifest.txt"),
                 "--out", str(again)]) == 0
    capsys.readouterr()
    same = {}
    for name in ("params.dklm", "metrics.jsonl", "stats.txt"):
        same[name] = (first / name).read_bytes() == (again / name).read_bytes()
    strip = lambda p: [l for l in p.read_text().splitlines() if not l.startswith("#")]
    same["manifest"] = strip(first / "manifest.txt") == strip(again / "manifest.txt")
    ok = all(same.values())
    assert report(ok, "determinism",
                  "byte-identical rerun from manifest: " +
                  ", ".join(f"{k}={'yes' if v else 'NO'}" for k, v in same.items()))
