import csv
import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from tscopula.cli import main
from tscopula.config import ConfigError, load_config
from tscopula.metrics import MetricReport
from tscopula.training import read_history

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SMOKE = CONFIGS / "smoke.yaml"


def write(path, data):
    path.write_text(yaml.safe_dump(data))
    return path


# -- config files ---------------------------------------------------------------------


def test_shipped_configs_validate():
    for path in CONFIGS.glob("*.yaml"):
        load_config(path)


def test_extends_differs_by_one_field():
    base, joint = load_config(CONFIGS / "base.yaml"), load_config(CONFIGS / "joint.yaml")
    assert joint.mode == "joint" and base.mode == "curriculum"
    assert joint.model == base.model and joint.train == base.train


def test_extends_deep_merges(tmp_path):
    write(tmp_path / "a.yaml", {"seed": 3, "train": {"batch_size": 8, "stage1": {"lr": 0.01}}})
    write(tmp_path / "b.yaml", {"extends": "a.yaml", "train": {"stage1": {"max_epochs": 4}}})
    cfg = load_config(tmp_path / "b.yaml")
    assert cfg.seed == 3 and cfg.train.batch_size == 8
    assert cfg.train.stage1.lr == 0.01 and cfg.train.stage1.max_epochs == 4


def test_circular_extends(tmp_path):
    write(tmp_path / "a.yaml", {"extends": "b.yaml"})
    write(tmp_path / "b.yaml", {"extends": "a.yaml"})
    with pytest.raises(ConfigError, match="circular"):
        load_config(tmp_path / "a.yaml")


def test_errors_carry_field_paths(tmp_path):
    write(tmp_path / "bad.yaml", {"train": {"stage1": {"lr": -1}}, "model": {"n_bins": 1, "colour": "red"}})
    with pytest.raises(ConfigError) as exc:
        load_config(tmp_path / "bad.yaml")
    paths = {e.split(":")[0] for e in exc.value.errors}
    assert {"train.stage1.lr", "model.n_bins", "model.colour"} <= paths


def test_csv_source_needs_path(tmp_path):
    write(tmp_path / "c.yaml", {"data": {"source": "csv"}})
    with pytest.raises(ConfigError, match="data.path"):
        load_config(tmp_path / "c.yaml")


# -- commands -------------------------------------------------------------------------


def test_invalid_field_exits_two(tmp_path, capsys):
    bad = write(tmp_path / "bad.yaml", {"extends": str(SMOKE), "train": {"batch_size": 0}})
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "run")]) == 2
    assert "train.batch_size" in capsys.readouterr().err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", "--config", str(SMOKE), "--out", str(out)]) == 0
    return out


def test_train_writes_two_phase_history(trained):
    history = read_history(trained / "history.jsonl")
    assert {r["stage"] for r in history} == {"stage1", "stage2"}
    ledger = json.loads((trained / "flops.json").read_text())
    assert ledger["total"] > 0
    assert (trained / "checkpoint.pt").stat().st_size > 0
    assert yaml.safe_load((trained / "config.yaml").read_text())["output_dir"] == str(trained)


def test_train_is_deterministic(trained, tmp_path):
    assert main(["train", "--config", str(SMOKE), "--out", str(tmp_path)]) == 0
    losses = lambda p: [(r["train_loss"], r["val_nll"]) for r in read_history(p / "history.jsonl")]  # noqa: E731
    assert losses(tmp_path) == losses(trained)


def test_joint_mode_flag(tmp_path):
    assert main(["train", "--config", str(SMOKE), "--out", str(tmp_path), "--mode", "joint"]) == 0
    assert {r["stage"] for r in read_history(tmp_path / "history.jsonl")} == {"joint"}


def test_eval_writes_reports_and_plots(trained, tmp_path):
    out = tmp_path / "eval"
    args = ["eval", "--config", str(SMOKE), "--out", str(out), "--checkpoint", str(trained / "checkpoint.pt")]
    assert main(args) == 0
    assert (out / "fan_chart.png").stat().st_size > 0
    assert (out / "nll_vs_flops.png").stat().st_size > 0
    report = MetricReport.from_dict(json.loads((out / "metrics.json").read_text()))
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert len(rows) == len(report) == 2
    for key in ("crps", "energy", "nll"):
        assert report.mean(key) == pytest.approx(np.mean([float(r[key]) for r in rows]))
    assert "| crps |" in (out / "results.md").read_text()


def test_eval_without_cutoffs_warns(trained, tmp_path, caplog):
    cfg = write(tmp_path / "empty.yaml", {"extends": str(SMOKE), "evaluation": {"cutoffs": []}})
    out = tmp_path / "eval"
    assert main(["eval", "--config", str(cfg), "--out", str(out), "--checkpoint", str(trained / "checkpoint.pt")]) == 0
    assert "no evaluation cutoffs" in caplog.text
    assert len(MetricReport.from_dict(json.loads((out / "metrics.json").read_text()))) == 0


def test_eval_rejects_mismatched_checkpoint(trained, tmp_path, capsys):
    cfg = write(tmp_path / "other.yaml", {"extends": str(SMOKE), "model": {"n_bins": 12}})
    args = ["eval", "--config", str(cfg), "--out", str(tmp_path), "--checkpoint", str(trained / "checkpoint.pt")]
    assert main(args) == 2
    assert "model.n_bins" in capsys.readouterr().err


def test_missing_checkpoint_is_runtime_error(tmp_path):
    args = ["eval", "--config", str(SMOKE), "--out", str(tmp_path), "--checkpoint", str(tmp_path / "none.pt")]
    assert main(args) == 1


def test_sample_command(trained, tmp_path):
    args = ["sample", "--config", str(SMOKE), "--out", str(tmp_path), "--checkpoint", str(trained / "checkpoint.pt"),
            "--n-samples", "7"]
    assert main(args) == 0
    samples = np.loadtxt(tmp_path / "samples.csv", delimiter=",", skiprows=1)
    assert samples.shape[0] == 7 and np.isfinite(samples).all()
    assert "nll" in json.loads((tmp_path / "sample_scores.json").read_text())


def test_copula_demo_figures(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["copula-demo", "--config", str(SMOKE), "--out", str(a)]) == 0
    assert main(["copula-demo", "--config", str(SMOKE), "--out", str(b)]) == 0
    report = json.loads((a / "ks_report.json").read_text())
    assert set(report) == {"curriculum", "joint"}
    for mode, summary in report.items():
        assert len(summary["figures"]) == 4
        assert len(summary["ks"]) == 2
        for name in summary["figures"].values():
            assert (a / name).stat().st_size > 0
    assert "ks_below_0.05" in report["curriculum"] and "ks_below_0.05" not in report["joint"]
    assert sorted(p.name for p in a.iterdir()) == sorted(p.name for p in b.iterdir())
    assert json.loads((b / "ks_report.json").read_text())["curriculum"]["ks"] == report["curriculum"]["ks"]
