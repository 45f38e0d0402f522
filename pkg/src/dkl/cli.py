"""Command-line entry point: verify, train, eval, bench-wmse.

Exit status: 0 on success, 1 when a verification or training run fails,
2 for usage and config errors. The DKL_OUT_DIR environment variable sets
the default root for run outputs.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields

import numpy as np

from . import __version__
from .bench import bench_wmse
from .class_stats import ClassStats, exact_recompute
from .config import ConfigError, build_config, parse_kv_file, write_manifest
from .data import import_logits
from .errors import FileFormatError
from .gradcheck import (
    check_asymmetry,
    check_finite_differences,
    check_kl_dkl_equivalence,
    check_wmse_identity,
)
from .model import forward, load_params, save_params
from .trainers import (
    TrainConfig,
    TrainingDiverged,
    eval_seed,
    evaluate,
    make_dataset,
    train_adversarial,
    train_baseline,
    train_distill,
)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _parse_int_list(text: str) -> tuple[int, ...]:
    try:
        values = tuple(int(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of integers, got {text!r}") from None
    if not values:
        raise ConfigError("class list is empty")
    return values


def _add_override_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("config overrides")
    for f in fields(TrainConfig):
        if f.name == "mode":
            continue
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}",
                           metavar="V", default=None, help=argparse.SUPPRESS)


def _collect_overrides(args) -> dict[str, str]:
    out = {}
    for f in fields(TrainConfig):
        value = getattr(args, f"cfg_{f.name}", None)
        if value is not None:
            out[f.name] = value
    return out


def _teacher_logits(cfg: TrainConfig, train_features: np.ndarray) -> np.ndarray:
    if cfg.teacher_logits:
        return import_logits(cfg.teacher_logits)
    if cfg.teacher_params:
        teacher = load_params(cfg.teacher_params)
        return forward(teacher, train_features)[0]
    raise ConfigError("distill needs teacher_logits or teacher_params")


def cmd_verify(args) -> int:
    classes = _parse_int_list(args.classes)
    reports = [check_kl_dkl_equivalence(args.trials, classes, args.seed, args.tolerance)]
    reports += check_asymmetry(max(30, args.trials // 5), args.seed, args.tolerance,
                               cancel_tolerance=min(1e-12, args.tolerance))
    reports += check_finite_differences(classes, args.seed)
    reports.append(check_wmse_identity(classes, args.seed, args.tolerance))
    lines, ok = [], True
    for rep in reports:
        lines += rep.lines() + [""]
        ok = ok and rep.passed
    lines.append(f"overall_passed {'true' if ok else 'false'}")
    text = "\n".join(lines)
    print(text)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    if not ok:
        failing = ", ".join(r.name for r in reports if not r.passed)
        print(f"failed sections: {failing}", file=sys.stderr)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_train(args) -> int:
    cfg = build_config(args.mode, parse_kv_file(args.config), _collect_overrides(args),
                       path=args.config)
    train_ds, test_ds = make_dataset(cfg)
    out_dir = args.out or os.path.join(os.environ.get("DKL_OUT_DIR", "runs"),
                                       f"{cfg.mode}-{cfg.loss}-seed{cfg.seed}")
    os.makedirs(out_dir, exist_ok=True)
    write_manifest(os.path.join(out_dir, "manifest.txt"), cfg, f"train {cfg.mode}", __version__)
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    stats = None
    with open(metrics_path, "w", encoding="utf-8") as fh:
        def on_epoch(record):
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()

        try:
            if cfg.mode == "baseline":
                params, metrics = train_baseline(cfg, train_ds, test_ds, on_epoch)
            elif cfg.mode == "distill":
                teacher = _teacher_logits(cfg, train_ds.features)
                params, metrics = train_distill(cfg, train_ds, test_ds, teacher, on_epoch)
            else:
                params, metrics, stats = train_adversarial(cfg, train_ds, test_ds, on_epoch)
        except TrainingDiverged as exc:
            print(f"error: {exc} (partial metrics kept in {metrics_path})", file=sys.stderr)
            return EXIT_FAIL
    save_params(os.path.join(out_dir, "params.dklm"), params)
    if stats is not None:
        stats.save(os.path.join(out_dir, "stats.txt"))
    for key in sorted(metrics[-1]):
        print(f"{key} {metrics[-1][key]!r}")
    print(f"outputs {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    params = load_params(args.params)
    file_values = parse_kv_file(args.config) if args.config else {}
    mode = file_values["mode"][0] if "mode" in file_values else ""
    cfg = build_config(mode, file_values, _collect_overrides(args),
                       path=args.config or "<flags>")
    _, test_ds = make_dataset(cfg)
    epoch = args.eval_epoch if args.eval_epoch is not None else cfg.epochs - 1
    atk = None if args.clean_only else cfg.attack()
    res = evaluate(params, test_ds, atk, seed=eval_seed(cfg.seed, epoch))
    lines = [f"clean_acc {res['clean_acc']!r}"]
    if "robust_acc" in res:
        lines.append(f"robust_acc {res['robust_acc']!r}")
    if args.margins:
        if args.stats:
            stats = ClassStats.load(args.stats)
        else:
            logits = forward(params, test_ds.features)[0]
            stats = exact_recompute(logits, test_ds.labels, test_ds.num_classes, temperature=1.0)
        for y in range(stats.num_classes):
            lines.append(f"margin {y} {stats.margin(y)!r}")
        lines.append(f"mean_margin {float(stats.margins().mean())!r}")
    text = "\n".join(lines)
    print(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    return EXIT_OK


def cmd_bench(args) -> int:
    lines, ok = bench_wmse(_parse_int_list(args.classes), args.batch, args.repeats,
                           args.seed, args.tolerance)
    print("\n".join(lines + [f"overall_passed {'true' if ok else 'false'}"]))
    return EXIT_OK if ok else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dkl",
        description="Decoupled KL losses: verification, desk-scale training, evaluation.")
    parser.add_argument("--version", action="version", version=f"dkl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    ver = sub.add_parser("verify", help="run the gradient and equivalence certificates")
    ver.add_argument("--classes", default="2,5,10,100", help="class counts to sweep")
    ver.add_argument("--trials", type=int, default=1000,
                     help="random trials per class count for the equivalence check")
    ver.add_argument("--seed", type=int, default=0)
    ver.add_argument("--tolerance", type=float, default=1e-10,
                     help="absolute tolerance for the equivalence-style checks")
    ver.add_argument("--report", default=None, help="also write the report to this file")
    ver.set_defaults(func=cmd_verify)

    train = sub.add_parser("train", help="run a training loop")
    tsub = train.add_subparsers(dest="mode", required=True)
    for mode, blurb in (("baseline", "hard-label cross-entropy"),
                        ("distill", "student against a fixed teacher"),
                        ("adversarial", "TRADES-style adversarial training")):
        tp = tsub.add_parser(mode, help=blurb)
        tp.add_argument("--config", required=True, help="key-value config document")
        tp.add_argument("--out", default=None, help="output directory")
        _add_override_flags(tp)
        tp.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate saved parameters")
    ev.add_argument("--params", required=True, help="params file (DKLM)")
    ev.add_argument("--config", default=None, help="config or manifest for data and attack")
    ev.add_argument("--clean-only", action="store_true", help="skip the robust evaluation")
    ev.add_argument("--margins", action="store_true", help="print per-class boundary margins")
    ev.add_argument("--stats", default=None, help="class-stats table for --margins")
    ev.add_argument("--eval-epoch", type=int, default=None,
                    help="evaluation stream epoch (default: last training epoch)")
    ev.add_argument("--out", default=None, help="also write the results to this file")
    _add_override_flags(ev)
    ev.set_defaults(func=cmd_eval)

    bench = sub.add_parser("bench-wmse", help="dense vs efficient wMSE benchmark")
    bench.add_argument("--classes", default="2,100,1000")
    bench.add_argument("--batch", type=int, default=64)
    bench.add_argument("--repeats", type=int, default=3)
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--tolerance", type=float, default=1e-10)
    bench.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
