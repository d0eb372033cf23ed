from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from src import layout
from src.errors import DataError
from src.features import FeatureCube
from src.pointcloud import DEFAULT_CLASSES
from src.previews import (
    feature_preview,
    label_palette_image,
    read_label_png,
    uncertainty_preview,
    write_label_png,
    write_png,
)
from src.projection import GridSpec, project
from src.render_report import render_metrics_table, render_summary_table
from src.synthetic import forest_plot_scan


def test_label_png_keeps_class_ids(tmp_path: Path) -> None:
    labels = np.array([[0, 1, 2], [5, 3, 0]])
    path = tmp_path / "fuse" / "labels.png"

    write_label_png(labels, path)

    assert np.array_equal(read_label_png(path, (2, 3)), labels)


def test_read_label_png_rejects_color_and_wrong_shape(tmp_path: Path) -> None:
    color = tmp_path / "color.png"
    write_png(np.zeros((2, 2, 3), dtype=np.uint8), color)
    with pytest.raises(DataError) as excinfo:
        read_label_png(color)
    assert "single-channel" in str(excinfo.value)

    gray = tmp_path / "gray.png"
    write_label_png(np.zeros((2, 2), dtype=np.int64), gray)
    with pytest.raises(DataError) as excinfo:
        read_label_png(gray, (3, 3))
    assert "does not match grid (3, 3)" in str(excinfo.value)


def test_palette_image_uses_class_colors() -> None:
    image = label_palette_image(np.array([[0, 2]]), DEFAULT_CLASSES)

    assert image.tolist() == [[[0, 0, 0], [200, 60, 40]]]


def test_uncertainty_preview_is_black_on_void() -> None:
    values = np.array([[0.0, 0.5, 1.0, 9.0]])
    valid = np.array([[True, True, True, False]])

    rgb = uncertainty_preview(values, valid)

    assert rgb.dtype == np.uint8
    assert rgb[0, 3].tolist() == [0, 0, 0]
    assert rgb[0, 2].tolist() == [255, 255, 255]


def test_feature_preview_of_one_channel_is_gray() -> None:
    cube = FeatureCube(("I",), np.array([[[0.0, 0.5, 1.0]]]), np.array([[True, True, True]]))

    rgb = feature_preview(cube, ["I"])

    assert rgb[0, 1].tolist() == [128, 128, 128]


def test_discover_scans_sorts_and_reports_empty(tmp_path: Path) -> None:
    (tmp_path / "b.ply").write_text("", encoding="utf-8")
    (tmp_path / "a.ply").write_text("", encoding="utf-8")
    (tmp_path / "notes.txt").write_text("", encoding="utf-8")

    assert [p.name for p in layout.discover_scans(tmp_path)] == ["a.ply", "b.ply"]
    with pytest.raises(DataError) as excinfo:
        layout.discover_scans(tmp_path, "*.las")
    assert "found 0 scans matching '*.las'" in str(excinfo.value)


def test_require_names_the_missing_stage(tmp_path: Path) -> None:
    with pytest.raises(DataError) as excinfo:
        layout.require(layout.stage_dir(tmp_path, "plot_01", "fuse") / "labels.png", "fuse")

    assert "run 'fuse' first" in str(excinfo.value)


def test_json_artifacts_are_sorted(tmp_path: Path) -> None:
    path = tmp_path / "report.json"

    layout.write_json(path, {"b": 1, "a": [1, 2]})

    assert path.read_text(encoding="utf-8").index('"a"') < path.read_text(encoding="utf-8").index('"b"')
    assert layout.read_json(path) == {"a": [1, 2], "b": 1}


def test_metrics_table_lists_summary_and_classes() -> None:
    report = {
        "oAcc": 0.9,
        "mAcc": 0.8,
        "mIoU": 0.7,
        "mIoU_void_excluded": None,
        "iou": {"Void": None, "Stem": 0.5},
        "class_acc": {"Void": None, "Stem": 0.75},
        "auprc": 0.42,
    }

    text = render_metrics_table("plot_01", report)

    assert text.startswith("plot_01\n")
    assert "mIoU Void excl." in text
    assert "n/a" in text
    assert "0.7500" in text
    assert "auprc: 0.4200" in text


def test_summary_table_handles_no_scans() -> None:
    assert render_summary_table({}) == "No scans evaluated\n"


def test_forest_plot_scan_is_deterministic_and_one_return_per_pixel() -> None:
    grid = GridSpec.from_degrees(3.0)

    first = forest_plot_scan(grid, seed=4)
    second = forest_plot_scan(grid, seed=4)

    assert np.array_equal(first.xyz, second.xyz)
    assert set(np.unique(first.labels)) == {1, 2, 3}
    assert int(project(first, grid).counts().max()) == 1
