from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

import src.main as cli
from src import pipeline
from src.config import load_config
from src.ensemble import LogitStack, save_logits
from src.main import main
from src.pointcloud import load_ply
from src.previews import read_label_png, write_label_png
from src.projection import GridSpec

# 3 deg keeps the stage tests small: 45 x 120 pixels per scan
_SMALL_RUN = """\
version: 1
seed: 3
workers: 2
io:
  input_dir: {input_dir}
  output_dir: {output_dir}
grid:
  step_deg: 3.0
radius:
  r_min: 0.1
  r_max: 2.0
tiling:
  n_tiles: 4
  buffer: 4
ensemble:
  members: 2
  seed_fraction: 0.1
  n_trees: 10
  max_depth: 8
refinement:
  k_vote: 5
  scales: [0.8]
  n_trees: 10
  max_depth: 8
sphere:
  resolution_deg: 5.0
  feature_set: N3
"""


def _write_config(tmp_path: Path) -> Path:
    path = tmp_path / "run.yaml"
    path.write_text(
        _SMALL_RUN.format(input_dir=tmp_path / "scans", output_dir=tmp_path / "out"),
        encoding="utf-8",
    )
    return path


_BUNDLED = Path(__file__).resolve().parents[1] / "configs" / "synthetic.yaml"


def test_synth_then_run_on_bundled_config_meets_accuracy(tmp_path: Path) -> None:
    dirs = ["--config", str(_BUNDLED), "--input", str(tmp_path / "scans"), "--output", str(tmp_path / "out")]

    assert main(["synth", *dirs]) == 0
    assert sorted(p.name for p in (tmp_path / "scans").iterdir()) == [
        "plot_01.ply",
        "plot_02.ply",
        "plot_03.ply",
    ]
    assert main(["run", *dirs, "--baseline"]) == 0

    scan = tmp_path / "out" / "plot_01"
    for relative in (
        "project/index.npz",
        "project/density.json",
        "featurize/features.fcub",
        "featurize/previews/n3.png",
        "fuse/labels.png",
        "fuse/uncertainty.fcub",
        "fuse/entropy.json",
        "refine/labeled.ply",
        "refine/labels_2d.png",
        "refine/report.json",
        "sphere/sphere.ply",
        "sphere/colorized.ply",
        "eval/metrics.json",
        "eval/metrics.txt",
    ):
        assert (scan / relative).exists(), relative

    # 1 deg grid over 135 x 360 deg; 2 deg sphere rounds 67.5 rows up
    assert read_label_png(scan / "fuse" / "labels.png").shape == (135, 360)
    assert len(load_ply(scan / "sphere" / "sphere.ply")) == 68 * 180
    density = json.loads((scan / "project" / "density.json").read_text(encoding="utf-8"))
    assert density["mode"] == 1
    summary = json.loads((tmp_path / "out" / "eval_summary.json").read_text(encoding="utf-8"))
    assert set(summary["scans"]) == {"plot_01", "plot_02", "plot_03"}
    assert summary["aggregate"]["oAcc"] >= 0.95
    for report in summary["scans"].values():
        assert report["oAcc"] >= 0.95
    assert "aggregate" in (tmp_path / "out" / "eval_summary.txt").read_text(encoding="utf-8")


def test_fuse_reads_external_logit_stacks(tmp_path: Path) -> None:
    config_path = _write_config(tmp_path)
    assert main(["synth", "--config", str(config_path)]) == 0
    config = load_config(config_path, {"io.scan_glob": "plot_01.ply"})
    pipeline.cmd_project(config)
    pipeline.cmd_featurize(config)

    logits = np.zeros((2, 6, 45, 120))
    logits[:, 1] = 4.0
    logits[1, 2] = 3.0
    save_logits(LogitStack(logits[:1]), tmp_path / "logits" / "plot_01_a.lgts")
    save_logits(LogitStack(logits[1:]), tmp_path / "logits" / "plot_01_b.lgts")

    summary = pipeline.cmd_fuse(config, logits_dir=str(tmp_path / "logits"))

    assert summary["plot_01"]["members"] == 2
    labels = read_label_png(tmp_path / "out" / "plot_01" / "fuse" / "labels.png")
    assert set(np.unique(labels)) <= {0, 1}


def test_eval_aggregate_does_not_depend_on_worker_count(tmp_path: Path) -> None:
    config_path = _write_config(tmp_path)
    assert main(["synth", "--config", str(config_path)]) == 0
    config = load_config(config_path)
    pipeline.cmd_project(config)
    for scan in ("plot_01", "plot_02", "plot_03"):
        write_label_png(np.ones((45, 120), dtype=np.int64), tmp_path / "out" / scan / "fuse" / "labels.png")

    serial = pipeline.cmd_eval(load_config(config_path, {"workers": 1}))
    serial_summary = json.loads((tmp_path / "out" / "eval_summary.json").read_text(encoding="utf-8"))
    parallel = pipeline.cmd_eval(load_config(config_path, {"workers": 3}))
    parallel_summary = json.loads((tmp_path / "out" / "eval_summary.json").read_text(encoding="utf-8"))

    assert serial == parallel
    assert serial_summary["aggregate"] == parallel_summary["aggregate"]
    per_scan = [report["oAcc"] for report in parallel_summary["scans"].values()]
    assert min(per_scan) <= parallel_summary["aggregate"]["oAcc"] <= max(per_scan)


def test_empty_input_directory_exits_with_data_error(tmp_path: Path) -> None:
    config = _write_config(tmp_path)
    (tmp_path / "scans").mkdir()

    assert main(["project", "--config", str(config)]) == 3


def test_stage_without_its_inputs_exits_with_data_error(tmp_path: Path) -> None:
    config = _write_config(tmp_path)
    assert main(["synth", "--config", str(config)]) == 0

    assert main(["refine", "--config", str(config)]) == 3


def test_bad_config_exits_with_config_error(tmp_path: Path) -> None:
    path = tmp_path / "bad.yaml"
    path.write_text("version: 1\ngrid:\n  step_deg: -1\n", encoding="utf-8")

    assert main(["project", "--config", str(path)]) == 2


def test_cli_overrides_reach_the_config(monkeypatch: pytest.MonkeyPatch) -> None:
    seen = {}

    def fake_project(config: dict) -> dict:
        seen.update(config)
        return {}

    monkeypatch.setitem(cli._COMMANDS, "project", fake_project)

    assert main(["project", "--seed", "9", "--workers", "3", "--feature-set", "C.A.P", "--input", "x"]) == 0
    assert seen["seed"] == 9
    assert seen["workers"] == 3
    assert seen["features"]["set"] == "CAP"
    assert seen["io"]["input_dir"] == "x"


def test_grid_from_config_uses_degrees() -> None:
    config = load_config(None, {"grid.step_deg": 0.25})

    assert pipeline.grid_from_config(config) == GridSpec.from_degrees(0.25)
