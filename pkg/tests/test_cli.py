"""End-to-end command tests through the argparse front door."""

import json
from pathlib import Path
from types import SimpleNamespace

import pytest
from conftest import fab_curve

from roarsel import cli
from roarsel.cli import _selection_rows, cmd_report, main
from roarsel.data import Task, load_dataset
from roarsel.errors import RoarAborted
from roarsel.models import Architecture, Head, ModelSpec
from roarsel.roar import DeletionOrder, save_curve
from roarsel.training import (
    CandidateResult,
    MetricKind,
    MetricValue,
    SelectionReport,
    TrainConfig,
)

REG = Head(task=Task.REGRESSION)


def base_config(root: Path) -> dict:
    return {
        "seed": 5,
        "out_dir": str(root / "out"),
        "dataset": {
            "path": str(root / "data"),
            "plant": {"n": 240, "t": 3, "b": 4, "signal_bands": [1, 3],
                      "signal_steps": [0, 1, 2], "noise": 0.2},
        },
        "train": {"max_epochs": 8, "patience": 3, "batch_size": 32,
                  "learning_rate": 0.003},
        "budget": {"n_samples": 24, "n_permutations": 6, "ensemble_size": 2,
                   "noise_scale": 0.15},
        "model": {"architecture": "mlp", "width": 16},
        "plans": [
            {"axis": "by_band", "order": "least_first", "estimator_tag": "svs"},
            {"axis": "by_band", "order": "most_first", "estimator_tag": "svs"},
            {"axis": "by_band", "order": "least_first", "estimator_tag": "gb"},
            {"axis": "by_band", "order": "most_first", "estimator_tag": "gb"},
        ],
        "grid": [
            {"architecture": "mlp", "width": 16},
            {"architecture": "rnn", "hidden_size": 8},
            {"architecture": "lstm", "hidden_size": 8},
            {"architecture": "gru", "hidden_size": 8},
            {"architecture": "tempcnn", "channels": 6, "kernel_size": 2,
             "dense_size": 12},
        ],
    }


def write_config(path: Path, cfg: dict) -> Path:
    path.write_text(json.dumps(cfg, indent=2))
    return path


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cliws")
    cfg_path = write_config(root / "run.json", base_config(root))
    assert main(["generate", "--config", str(cfg_path)]) == 0
    return SimpleNamespace(root=root, cfg_path=cfg_path,
                           data=root / "data", out=root / "out")


# -- generate -------------------------------------------------------------------


def test_generate_wrote_a_loadable_dataset(workspace):
    d = load_dataset(workspace.data)
    assert d.n_samples == 240
    assert d.shape == (240, 3, 4)


def test_generate_persists_the_effective_config(workspace):
    echoed = json.loads((workspace.out / "effective.json").read_text())
    assert echoed["train"]["max_epochs"] == 8
    assert echoed["split"]["holdout_years"] == 2  # default, filled in
    assert echoed["dataset"]["plant"]["n"] == 240


def test_generate_same_seed_is_byte_identical(workspace, tmp_path):
    cfg = base_config(workspace.root)
    for name in ("copy1", "copy2"):
        cfg["dataset"]["path"] = str(tmp_path / name)
        cfg["out_dir"] = str(tmp_path / f"out_{name}")
        assert main(["generate", "--config",
                     str(write_config(tmp_path / f"{name}.json", cfg))]) == 0
    a = (tmp_path / "copy1" / "values.bin").read_bytes()
    b = (tmp_path / "copy2" / "values.bin").read_bytes()
    assert a == b
    assert a == (workspace.data / "values.bin").read_bytes()


def test_generate_seed_override_changes_the_data(workspace, tmp_path):
    cfg = base_config(workspace.root)
    cfg["dataset"]["path"] = str(tmp_path / "reseeded")
    cfg["out_dir"] = str(tmp_path / "out")
    p = write_config(tmp_path / "cfg.json", cfg)
    assert main(["generate", "--config", str(p), "--seed", "99"]) == 0
    a = (tmp_path / "reseeded" / "values.bin").read_bytes()
    assert a != (workspace.data / "values.bin").read_bytes()


def test_generate_without_plant_block_is_a_config_error(tmp_path, capsys):
    cfg = {"dataset": {"path": str(tmp_path / "d")}, "out_dir": str(tmp_path / "o")}
    p = write_config(tmp_path / "cfg.json", cfg)
    assert main(["generate", "--config", str(p)]) == 2
    assert "config error" in capsys.readouterr().err


def test_malformed_config_exits_2_without_outputs(tmp_path, capsys):
    cfg = base_config(tmp_path)
    cfg["bogus"] = True
    p = write_config(tmp_path / "cfg.json", cfg)
    assert main(["roar", "--config", str(p)]) == 2
    assert "bogus" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()
    assert not (tmp_path / "data").exists()


# -- select ---------------------------------------------------------------------


def test_select_emits_one_row_per_architecture(workspace):
    assert main(["select", "--config", str(workspace.cfg_path)]) == 0
    lines = (workspace.out / "selection.csv").read_text().splitlines()
    assert lines[0] == "architecture,learning_rate,val_metric,test_metric,note"
    assert len(lines) == 6
    archs = {line.split(",")[0] for line in lines[1:]}
    assert archs == {"mlp", "rnn", "lstm", "gru", "tempcnn"}
    for line in lines[1:]:
        _, lr, val, test, _ = line.split(",", 4)
        float(lr), float(val), float(test)
    report = json.loads((workspace.out / "selection.json").read_text())
    assert len(report["ranking"]) == 5
    assert report["test_metric"] is not None


def test_selection_rows_note_ties_and_failures():
    def ok(i, arch, v):
        return CandidateResult(
            index=i, spec=ModelSpec(arch, REG), cfg=TrainConfig(seed=0),
            val_metric=MetricValue(MetricKind.R2, v), report=None,
            test_metric=MetricValue(MetricKind.R2, v))

    failed = CandidateResult(
        index=2, spec=ModelSpec(Architecture.TEMPCNN, REG), cfg=TrainConfig(seed=0),
        val_metric=None, report=None, error="kernel larger than the series")
    report = SelectionReport(
        ranking=[ok(0, Architecture.MLP, 0.8), ok(1, Architecture.GRU, 0.8), failed],
        best_index=0, test_metric=MetricValue(MetricKind.R2, 0.8))
    rows = _selection_rows(report)
    assert [r["architecture"] for r in rows] == ["mlp", "gru", "tempcnn"]
    assert rows[0]["note"] == rows[1]["note"] == "tie resolved by grid order"
    assert rows[2]["note"].startswith("failed:")
    assert rows[2]["val_metric"] is None


# -- roar -----------------------------------------------------------------------


def test_roar_emits_csv_and_svg_per_plan(workspace):
    assert main(["roar", "--config", str(workspace.cfg_path)]) == 0
    for tag in ("svs", "gb"):
        for order in ("least_first", "most_first"):
            slug = f"{tag}_{order}_by_band"
            assert (workspace.out / f"{slug}.curve.json").exists()
            csv_text = (workspace.out / f"{slug}.curve.csv").read_text()
            assert csv_text.startswith("cycle,fraction_removed,val_metric,test_metric\n")
            assert len(csv_text.splitlines()) == 5  # baseline + three cycles
            svg = (workspace.out / f"{slug}.svg").read_text()
            assert svg.startswith("<svg ") and "baseline" in svg


def test_roar_rerun_is_byte_identical(workspace, tmp_path):
    first = {
        p.name: p.read_bytes()
        for p in workspace.out.glob("*.curve.csv")
    }
    assert len(first) == 4
    assert main(["roar", "--config", str(workspace.cfg_path)]) == 0
    for name, payload in first.items():
        assert (workspace.out / name).read_bytes() == payload


def test_roar_resume_reuses_completed_campaigns(workspace, monkeypatch, capsys):
    def explode(*args, **kwargs):
        raise AssertionError("resume must not recompute a finished campaign")

    monkeypatch.setattr(cli, "run_roar", explode)
    assert main(["roar", "--config", str(workspace.cfg_path), "--resume"]) == 0
    assert capsys.readouterr().out.count("reusing") == 4


def test_roar_without_model_block_is_a_config_error(workspace, tmp_path, capsys):
    cfg = base_config(workspace.root)
    del cfg["model"]
    cfg["out_dir"] = str(tmp_path / "out")
    p = write_config(tmp_path / "cfg.json", cfg)
    assert main(["roar", "--config", str(p)]) == 2
    assert "model block" in capsys.readouterr().err


def test_roar_abort_labels_partial_outputs(workspace, tmp_path, monkeypatch, capsys):
    partial = fab_curve([0.9, 0.8], [[4]], DeletionOrder.LEAST_FIRST)

    def abort(*args, **kwargs):
        raise RoarAborted("cycle 2 failed: boom", partial)

    monkeypatch.setattr(cli, "run_roar", abort)
    cfg = base_config(workspace.root)
    cfg["out_dir"] = str(tmp_path / "out")
    cfg["plans"] = cfg["plans"][:1]
    p = write_config(tmp_path / "cfg.json", cfg)
    assert main(["roar", "--config", str(p)]) == 3
    assert "boom" in capsys.readouterr().err
    out = tmp_path / "out"
    assert (out / "svs_least_first_by_band.curve.json.partial").exists()
    assert (out / "svs_least_first_by_band.curve.csv.partial").exists()
    assert not (out / "svs_least_first_by_band.curve.json").exists()


def test_out_override_redirects_everything(workspace, tmp_path):
    other = tmp_path / "elsewhere"
    assert main(["roar", "--config", str(workspace.cfg_path),
                 "--out", str(other), "--resume"]) == 0
    # fresh directory has no completed campaigns, so all four recompute
    assert len(list(other.glob("*.curve.csv"))) == 4
    assert (other / "effective.json").exists()


# -- report ---------------------------------------------------------------------


def test_report_prints_both_set_queries(tmp_path, capsys):
    least = fab_curve([0.9, 0.89, 0.88, 0.5, 0.4], [[4], [3], [2], [1]],
                      DeletionOrder.LEAST_FIRST, tolerance=0.05)
    most = fab_curve([0.9, 0.3, 0.2, 0.1, 0.05], [[1], [3], [0], [2]],
                     DeletionOrder.MOST_FIRST)
    a, b = tmp_path / "least.curve.json", tmp_path / "most.curve.json"
    save_curve(least, a)
    save_curve(most, b)
    assert main(["report", str(a), str(b)]) == 0
    out = capsys.readouterr().out
    assert "sufficient set (3 of 5): [0, 1, 2]" in out
    assert "max fraction removable within 0.05: 0.4000" in out
    assert "necessary set (floor 0.4500): [1]" in out
    assert out.count("n/a") == 2


def test_report_floor_override(tmp_path, capsys):
    most = fab_curve([0.9, 0.6, 0.3, 0.2, 0.1], [[1], [3], [0], [2]],
                     DeletionOrder.MOST_FIRST)
    p = tmp_path / "most.curve.json"
    save_curve(most, p)
    assert main(["report", str(p), "--floor", "0.5"]) == 0
    assert "necessary set (floor 0.5000): [1, 3]" in capsys.readouterr().out


def test_report_missing_file_exits_3(tmp_path, capsys):
    assert main(["report", str(tmp_path / "nope.curve.json")]) == 3
    assert "no curve file" in capsys.readouterr().err


def test_report_unreadable_curve_exits_3(tmp_path, capsys):
    p = tmp_path / "junk.curve.json"
    p.write_text("{not json")
    assert main(["report", str(p)]) == 3
    assert "unreadable curve" in capsys.readouterr().err


def test_cmd_report_returns_the_printed_text(tmp_path, capsys):
    least = fab_curve([0.9, 0.89], [[4]], DeletionOrder.LEAST_FIRST)
    p = tmp_path / "c.curve.json"
    save_curve(least, p)
    text = cmd_report([p])
    assert capsys.readouterr().out == text + "\n"
    assert "sufficient set" in text
