import json

import numpy as np
import pytest

from dkl.cli import main
from dkl.class_stats import ClassStats
from dkl.config import ConfigError, build_config, config_lines, parse_kv_file
from dkl.data import export_logits
from dkl.model import forward, load_params
from dkl.trainers import TrainConfig, make_dataset, train_baseline

TINY_CONFIG = """\
# desk-scale smoke config
loss kl
alpha 1.0
beta 1.0
classes 4
dim 6
n_per_class 30
spread 0.3
data_seed 3
epochs 2
batch_size 64
base_lr 0.5
hidden_dims 16
seed 0
"""


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(TINY_CONFIG)
    return str(path)


# --- config parsing -------------------------------------------------------


def test_parse_kv_file_values_and_lines(config_path):
    values = parse_kv_file(config_path)
    assert values["loss"] == ("kl", 2)
    assert values["hidden_dims"] == ("16", 13)


def test_parse_rejects_unknown_key(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("loss kl\nnot_a_key 3\n")
    with pytest.raises(ConfigError, match=r"bad\.cfg:2.*not_a_key"):
        parse_kv_file(path)


def test_parse_rejects_duplicate_key(tmp_path):
    path = tmp_path / "dup.cfg"
    path.write_text("loss kl\nloss dkl\n")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_kv_file(path)


def test_build_config_coercion_and_overrides(config_path):
    cfg = build_config("baseline", parse_kv_file(config_path),
                       {"epochs": "5", "hidden_dims": "8,4", "attack_random_start": "false"})
    assert cfg.mode == "baseline"
    assert cfg.epochs == 5
    assert cfg.hidden_dims == (8, 4)
    assert cfg.attack_random_start is False


def test_build_config_bad_value_diagnostics(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("epochs not_an_int\n")
    with pytest.raises(ConfigError, match=r"bad\.cfg:1.*epochs"):
        build_config("baseline", parse_kv_file(path), path=str(path))


def test_build_config_mode_mismatch(config_path):
    values = parse_kv_file(config_path)
    values["mode"] = ("adversarial", 99)
    with pytest.raises(ConfigError, match="mode"):
        build_config("baseline", values)


def test_config_lines_round_trip(tmp_path):
    cfg = TrainConfig(mode="adversarial", loss="ikl", alpha=2.5, hidden_dims=(8, 4))
    path = tmp_path / "round.cfg"
    path.write_text("\n".join(config_lines(cfg)) + "\n")
    again = build_config("adversarial", parse_kv_file(path))
    assert again == cfg


# --- cli ------------------------------------------------------------------


def test_cli_verify_small(capsys):
    code = main(["verify", "--classes", "2", "--trials", "40"])
    out = capsys.readouterr().out
    assert code == 0
    assert "[kl_dkl_equivalence]" in out
    assert "overall_passed true" in out
    assert "class_counts 2" in out


def test_cli_verify_zero_tolerance_fails(capsys):
    code = main(["verify", "--classes", "2", "--trials", "10", "--tolerance", "0"])
    assert code == 1
    assert "overall_passed false" in capsys.readouterr().out


def test_cli_train_requires_config():
    with pytest.raises(SystemExit) as exc:
        main(["train", "baseline"])
    assert exc.value.code == 2


def test_cli_train_missing_config_file(tmp_path, capsys):
    code = main(["train", "baseline", "--config", str(tmp_path / "nope.cfg"),
                 "--out", str(tmp_path / "o")])
    assert code == 2
    assert "error:" in capsys.readouterr().err


def test_cli_train_and_eval_round_trip(tmp_path, config_path, capsys):
    out_dir = tmp_path / "run"
    code = main(["train", "adversarial", "--config", config_path, "--out", str(out_dir),
                 "--loss", "ikl", "--epochs", "3"])
    assert code == 0
    capsys.readouterr()
    assert (out_dir / "params.dklm").exists()
    assert (out_dir / "stats.txt").exists()
    records = [json.loads(line) for line in (out_dir / "metrics.jsonl").read_text().splitlines()]
    assert len(records) == 3

    code = main(["eval", "--params", str(out_dir / "params.dklm"),
                 "--config", str(out_dir / "manifest.txt")])
    assert code == 0
    lines = dict(l.split(" ", 1) for l in capsys.readouterr().out.strip().splitlines())
    assert float(lines["clean_acc"]) == records[-1]["clean_acc"]
    assert float(lines["robust_acc"]) == records[-1]["robust_acc"]


def test_cli_eval_margins_uniform_stats(tmp_path, config_path, capsys):
    out_dir = tmp_path / "run"
    assert main(["train", "baseline", "--config", config_path, "--out", str(out_dir)]) == 0
    capsys.readouterr()
    stats_path = tmp_path / "uniform.txt"
    ClassStats.uniform(4).save(stats_path)
    code = main(["eval", "--params", str(out_dir / "params.dklm"), "--config", config_path,
                 "--clean-only", "--margins", "--stats", str(stats_path)])
    assert code == 0
    out = capsys.readouterr().out
    for y in range(4):
        assert f"margin {y} 0.0" in out
    assert "mean_margin 0.0" in out


def test_cli_eval_zero_epsilon_matches_clean(tmp_path, config_path, capsys):
    out_dir = tmp_path / "run"
    assert main(["train", "baseline", "--config", config_path, "--out", str(out_dir)]) == 0
    capsys.readouterr()
    code = main(["eval", "--params", str(out_dir / "params.dklm"), "--config", config_path,
                 "--epsilon", "0"])
    assert code == 0
    lines = dict(l.split(" ", 1) for l in capsys.readouterr().out.strip().splitlines())
    assert lines["robust_acc"] == lines["clean_acc"]


def test_cli_distill_mismatched_teacher(tmp_path, config_path, capsys):
    bad = tmp_path / "teacher.dkll"
    export_logits(bad, np.zeros((7, 4)))
    code = main(["train", "distill", "--config", config_path, "--teacher-logits", str(bad),
                 "--out", str(tmp_path / "o")])
    assert code == 2
    err = capsys.readouterr().err
    assert "(7, 4)" in err and "does not match" in err


def test_cli_distill_with_teacher_params(tmp_path, config_path, capsys):
    cfg = build_config("baseline", parse_kv_file(config_path))
    train, test = make_dataset(cfg)
    teacher_params, _ = train_baseline(cfg, train, test)
    from dkl.model import save_params

    tpath = tmp_path / "teacher.dklm"
    save_params(tpath, teacher_params)
    out_dir = tmp_path / "kd"
    code = main(["train", "distill", "--config", config_path, "--teacher-params", str(tpath),
                 "--out", str(out_dir), "--loss", "ikl"])
    assert code == 0
    records = [json.loads(line) for line in (out_dir / "metrics.jsonl").read_text().splitlines()]
    assert "agreement" in records[-1]


def test_cli_train_seed_override_lands_in_manifest(tmp_path, config_path, capsys):
    out_dir = tmp_path / "run"
    assert main(["train", "baseline", "--config", config_path, "--out", str(out_dir),
                 "--seed", "123"]) == 0
    manifest = (out_dir / "manifest.txt").read_text()
    assert "seed 123" in manifest.splitlines()


def test_cli_bench_small(capsys):
    code = main(["bench-wmse", "--classes", "2,50", "--batch", "8", "--repeats", "1"])
    out = capsys.readouterr().out
    assert code == 0
    assert "[wmse_bench C=50]" in out
    assert "overall_passed true" in out


def test_cli_divergent_train_keeps_partial_metrics(tmp_path, config_path, capsys):
    out_dir = tmp_path / "run"
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        code = main(["train", "baseline", "--config", config_path, "--out", str(out_dir),
                     "--base-lr", "1e150", "--epochs", "4"])
    assert code == 1
    assert "non-finite" in capsys.readouterr().err
    assert (out_dir / "metrics.jsonl").exists()
    assert (out_dir / "manifest.txt").exists()
