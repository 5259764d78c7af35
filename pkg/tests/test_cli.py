"""Command line front end: argument handling, exit codes, artifacts."""

import json
import os

import pytest

from fedcvu.cli import build_parser, main
from fedcvu.data import load_dataset


@pytest.fixture()
def tiny_config(tmp_path):
    """A config small enough for sub-second runs."""
    raw = {
        "method": "fedcvu",
        "rounds": 2, "clients": 2, "local_epochs": 1, "batch_size": 16,
        "seeds": [0], "eval_every": 2,
        "synth": {"n_classes": 4, "d_in": 8, "n_views": 4,
                  "seen_views": [0, 1], "unseen_views": [2, 3],
                  "samples_per_class_per_view": 6},
        "model": {"d_in": 8, "d": 8, "n_blocks": 2, "n_classes": 4},
        "sla": {"budget_frac": 0.8, "proj_dim": 8, "mandatory": [0, 3]},
    }
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(raw), encoding="utf-8")
    return str(path)


def test_parser_rejects_unknown_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(["run", "--budget", "3"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_parser_rejects_unknown_method():
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(["run", "--method", "fedsgd"])
    assert exc.value.code == 2


def test_validate_default_config(capsys):
    assert main(["validate"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["config"]["method"] == "fedcvu"
    assert doc["toggles"]["sla"] is True


def test_validate_missing_config(capsys):
    assert main(["validate", "--config", "/nonexistent/cfg.json"]) == 2
    assert "error:" in capsys.readouterr().err


def test_validate_bad_values(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"rounds": 0}), encoding="utf-8")
    assert main(["validate", "--config", str(path)]) == 2
    assert "rounds" in capsys.readouterr().err


def test_run_with_method_override(tiny_config, tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["run", "--config", tiny_config, "--method", "fedavg",
                 "--out", str(out)])
    assert code == 0
    assert "method fedavg" in capsys.readouterr().out
    summary = json.loads((out / "summary.json").read_text())
    assert summary["method"] == "fedavg"
    assert summary["config"]["method"] == "fedavg"
    header = (out / "metrics.csv").read_text().splitlines()[0]
    assert header.startswith("round,method,seed,")


def test_run_seed_and_rounds_overrides(tiny_config, tmp_path):
    out = tmp_path / "run"
    assert main(["run", "--config", tiny_config, "--seed", "5",
                 "--rounds", "1", "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["seeds"] == [5]
    assert summary["config"]["rounds"] == 1


def test_run_with_plots_renders_figures(tiny_config, tmp_path):
    out = tmp_path / "run"
    assert main(["run", "--config", tiny_config, "--out", str(out),
                 "--plots"]) == 0
    for name in ("accuracy_curves.png", "communication.png", "sync_frequency.png"):
        assert (out / name).stat().st_size > 0, name


def test_report_on_finished_run(tiny_config, tmp_path):
    out = tmp_path / "run"
    assert main(["run", "--config", tiny_config, "--out", str(out)]) == 0
    assert not (out / "accuracy_curves.png").exists()
    assert main(["report", str(out)]) == 0
    assert (out / "accuracy_curves.png").stat().st_size > 0


def test_gen_data_roundtrip(tiny_config, tmp_path, capsys):
    data_path = tmp_path / "views.npz"
    assert main(["gen-data", "--config", tiny_config, "--seed", "9",
                 "--out", str(data_path)]) == 0
    assert "wrote" in capsys.readouterr().out
    dataset = load_dataset(str(data_path))
    assert dataset.config.seed == 9
    # a run can consume the file it just wrote
    out = tmp_path / "run"
    assert main(["run", "--config", tiny_config, "--data", str(data_path),
                 "--out", str(out)]) == 0


def test_run_rejects_mismatched_data_file(tiny_config, tmp_path, capsys):
    data_path = tmp_path / "views.npz"
    assert main(["gen-data", "--out", str(data_path)]) == 0  # default synth
    code = main(["run", "--config", tiny_config, "--data", str(data_path),
                 "--out", str(tmp_path / "run")])
    assert code == 2
    assert "different synth config" in capsys.readouterr().err
