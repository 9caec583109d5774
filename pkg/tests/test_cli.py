import json
import os

import numpy as np
import pytest

from sfp import cli
from sfp.datasets import read_meta, write_idx

TRAIN = ["--lr", "0.02", "--epochs", "3", "--batch-size", "50", "--p-i", "0.8"]


def _tree(root):
    """Relative path -> bytes for every file except wall-clock timing."""
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            if f != "timing":
                p = os.path.join(dirpath, f)
                out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


@pytest.fixture
def linear_data(tmp_path):
    out = tmp_path / "lin"
    assert cli.main(["gen-data", "--task", "linear", "--ratios", "0.9,0.7,0.0", "--n", "600", "--out", str(out)]) == 0
    return out


def test_gen_data_linear_layout_and_rerun(linear_data, tmp_path):
    manifest = read_meta(linear_data / "manifest")
    assert manifest["environments"] == "env0,env1,env2"
    again = tmp_path / "again"
    assert cli.main(["gen-data", "--config", str(linear_data / "config"), "--out", str(again)]) == 0
    first, second = _tree(linear_data), _tree(again)
    first.pop("config"), second.pop("config")
    assert first == second


def test_gen_data_colored(tmp_path):
    rng = np.random.default_rng(0)
    write_idx(tmp_path / "img", rng.integers(0, 256, (60, 28, 28)))
    write_idx(tmp_path / "lab", np.arange(60) % 10)
    out = tmp_path / "cm"
    code = cli.main(
        ["gen-data", "--task", "colored-mnist", "--images", str(tmp_path / "img"), "--labels", str(tmp_path / "lab"), "--ratios", "0.8,0.6,0.0", "--seed", "1", "--out", str(out)]
    )
    assert code == 0
    assert sorted(p.name for p in out.iterdir() if p.is_dir()) == ["env0", "env1", "env2"]


@pytest.mark.parametrize(
    "argv",
    [
        ["gen-data", "--task", "colored-mnist"],
        ["gen-data", "--task", "colored-mnist", "--images", "/nonexistent", "--labels", "/nonexistent"],
        ["gen-data", "--task", "linear", "--ratios", "0.5,1.5"],
        ["gen-data", "--task", "linear", "--seed", "1..3"],
        ["gen-data", "--config", "/nonexistent/config"],
    ],
)
def test_gen_data_config_errors(argv, tmp_path):
    assert cli.main(argv + ["--out", str(tmp_path / "x")]) == 2


def test_unknown_config_key(tmp_path):
    (tmp_path / "config").write_text("task=linear\nbogus=1\n")
    assert cli.main(["gen-data", "--config", str(tmp_path / "config"), "--out", str(tmp_path / "x")]) == 2


def test_parse_seeds():
    assert cli.parse_seeds("1..5") == [1, 2, 3, 4, 5]
    assert cli.parse_seeds("4,9") == [4, 9]
    assert cli.parse_seeds("3") == [3]
    for bad in ("5..1", "a"):
        with pytest.raises(cli.ConfigError):
            cli.parse_seeds(bad)


def test_train_seed_grid_and_eta_zero_reduction(linear_data, tmp_path):
    runs = tmp_path / "runs"
    assert cli.main(["train", "--method", "sfp", "--dataset", str(linear_data), "--seed", "1..2", "--out", str(runs)] + TRAIN) == 0
    for s in (1, 2):
        summary = read_meta(runs / f"sfp-seed{s}" / "summary")
        assert summary["status"] == "ok" and summary["seed"] == str(s)
        assert (runs / f"sfp-seed{s}" / "checkpoint" / "manifest.json").exists()
        assert (runs / f"sfp-seed{s}" / "timing").exists()
    assert cli.main(["train", "--method", "erm", "--dataset", str(linear_data), "--seed", "1", "--out", str(runs)] + TRAIN) == 0
    zero = tmp_path / "zero"
    argv = ["train", "--method", "sfp", "--eta-mode", "fixed:0", "--dataset", str(linear_data), "--seed", "1", "--out", str(zero)]
    assert cli.main(argv + TRAIN) == 0
    assert (runs / "erm-seed1" / "trace.csv").read_bytes() == (zero / "sfp-seed1" / "trace.csv").read_bytes()


def test_train_rerun_from_config_is_byte_identical(linear_data, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["train", "--method", "sfp+rex", "--dataset", str(linear_data), "--seed", "2", "--out", str(a)] + TRAIN) == 0
    assert cli.main(["train", "--config", str(a / "sfp+rex-seed2"), "--out", str(b)]) == 0
    first, second = _tree(a), _tree(b)
    cfg_a, cfg_b = first.pop("sfp+rex-seed2/config"), second.pop("sfp+rex-seed2/config")
    assert cfg_a.replace(str(a).encode(), b"") == cfg_b.replace(str(b).encode(), b"")
    assert first == second


def test_train_jobs_match_serial(linear_data, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    base = ["train", "--method", "erm", "--dataset", str(linear_data), "--seed", "1..2"] + TRAIN
    assert cli.main(base + ["--out", str(a)]) == 0
    assert cli.main(base + ["--out", str(b), "--jobs", "2"]) == 0
    for s in (1, 2):
        assert (a / f"erm-seed{s}" / "trace.csv").read_bytes() == (b / f"erm-seed{s}" / "trace.csv").read_bytes()


def test_train_divergence_exit_code(linear_data, tmp_path):
    code = cli.main(["train", "--method", "erm", "--dataset", str(linear_data), "--lr", "1000", "--epochs", "3", "--out", str(tmp_path / "d")])
    assert code == 3
    assert read_meta(tmp_path / "d" / "erm-seed1" / "summary")["status"].startswith("diverged")


@pytest.mark.parametrize(
    "extra",
    [["--method", "sgd"], ["--p-i", "1.5"], ["--eta-mode", "fixed:-1"], ["--test-env", "7"], ["--lr", "0"]],
)
def test_train_config_errors(linear_data, tmp_path, extra):
    argv = ["train", "--dataset", str(linear_data), "--epochs", "1", "--out", str(tmp_path / "e")] + extra
    assert cli.main(argv) == 2


def test_train_missing_dataset(tmp_path):
    assert cli.main(["train", "--dataset", str(tmp_path / "none")]) == 2


def test_verify_single_property(tmp_path):
    assert cli.main(["verify", "--only", "loss_gap", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "verify.json").read_text())
    assert [c["name"] for c in report["checks"]] == ["loss_gap"] and report["passed"]


def test_verify_failure_exit_code(tmp_path):
    # two seeds cannot meet an 18-seed quota
    assert cli.main(["verify", "--only", "penalty", "--seeds", "2", "--out", str(tmp_path)]) == 4


def test_verify_unknown_check():
    assert cli.main(["verify", "--only", "nope"]) == 2


def test_report_aggregates(linear_data, tmp_path):
    runs = tmp_path / "runs"
    for method in ("erm", "sfp"):
        cli.main(["train", "--method", method, "--dataset", str(linear_data), "--seed", "1..2", "--out", str(runs)] + TRAIN)
    out = tmp_path / "table.csv"
    assert cli.main(["report", str(runs), "--out", str(out)]) == 0
    rows = out.read_text().splitlines()
    assert rows[0].startswith("method,dataset,runs")
    assert [r.split(",")[0] for r in rows[1:]] == ["erm", "sfp"]
    assert all(r.split(",")[2] == "2" for r in rows[1:])
    assert cli.main(["report", str(tmp_path / "nothing")]) == 2
