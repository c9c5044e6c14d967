import json

import pytest

from gaprppg.cli import main

SMALL = ["--set", "synth.n_subjects=2", "--set", "synth.n_clips=2", "--set", "synth.duration_s=12"]
FAST = ["--set", "data.stride=50", "--set", "data.rows=32", "--set", "train.iterations=4",
        "--set", "train.batch_size=4", "--set", "train.eval_every=2"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_data")
    assert main(["synth", "--out", str(out), *SMALL]) == 0
    return out


@pytest.fixture(scope="module")
def run(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_run")
    assert main(["train", "--data", str(data), "--out", str(out), *FAST]) == 0
    return out


def test_synth_layout(data):
    assert (data / "manifest.json").exists()
    assert len(list(data.rglob("clip_*.stm"))) == 2 * 4 * 2 * 2  # normalized + raw


def test_train_outputs(run):
    for name in ("checkpoint.pt", "loss_log.csv", "val_log.csv", "heldout_predictions.csv", "metrics.csv",
                 "metrics.json", "audit.json", "config.json"):
        assert (run / name).exists(), name
    assert json.loads((run / "audit.json").read_text())["accessed"] == []


def test_train_is_byte_reproducible(data, run, tmp_path):
    assert main(["train", "--data", str(data), "--out", str(tmp_path), *FAST]) == 0
    for name in ("metrics.csv", "loss_log.csv", "heldout_predictions.csv"):
        assert (tmp_path / name).read_bytes() == (run / name).read_bytes(), name


def test_adapt_eval_report(data, run, tmp_path):
    args = ["adapt", "--data", str(data), "--out", str(tmp_path), "--checkpoint", str(run / "checkpoint.pt"),
            "--domain", "dom3", "--set", "data.stride=50", "--set", "data.rows=32"]
    assert main(args) == 0
    assert (tmp_path / "metrics_adapted.csv").exists() and (tmp_path / "adapt_log.csv").exists()
    assert main(["eval", "--predictions", str(tmp_path / "predictions.csv")]) == 0
    assert (tmp_path / "eval_predictions.csv").exists()
    assert main(["report", "--run", str(tmp_path)]) == 0
    assert (tmp_path / "report" / "summary.md").exists()


def test_baseline(data, tmp_path):
    assert main(["baseline", "--data", str(data), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "baseline.csv").exists() and (tmp_path / "baseline_metrics.csv").exists()


def test_analyze(data, tmp_path):
    stm = next(data.rglob("clip_00.stm"))
    assert main(["analyze", "--stm", str(stm), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "spectrum.csv").exists() and (tmp_path / "ssm.csv").exists()


def test_gradcheck_command(tmp_path, capsys):
    assert main(["gradcheck", "--set", "gradcheck.seeds=[0]", "--out", str(tmp_path)]) == 0
    assert "PASS" in capsys.readouterr().out
    assert (tmp_path / "gradcheck.csv").exists()


def test_sweep_pi(data, tmp_path):
    args = ["sweep-pi", "--data", str(data), "--out", str(tmp_path), *FAST, "--set", "train.iterations=2",
            "--set", "sweep.grid=[0.0, 0.3]"]
    assert main(args) == 0
    text = (tmp_path / "pi_sweep.csv").read_text().splitlines()
    assert text[0].startswith("pi,task,mae") and len(text) == 1 + 2 * 3


@pytest.mark.parametrize("bad", [["--set", "train.bogus=1"], ["--set", "loss.p1=-1"], ["--set", "noequals"]])
def test_validation_exit_code(data, tmp_path, bad):
    assert main(["train", "--data", str(data), "--out", str(tmp_path), *bad]) == 2


def test_missing_inputs_exit_code(tmp_path):
    assert main(["train", "--out", str(tmp_path)]) == 2
    assert main(["eval"]) == 2
    assert main(["adapt", "--data", str(tmp_path), "--out", str(tmp_path)]) == 2


def test_numeric_failure_exit_code(data, tmp_path):
    args = ["train", "--data", str(data), "--out", str(tmp_path), *FAST, "--set", "train.lr=1e30"]
    assert main(args) == 3
