from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np
import pytest

from src.errors import DataError
from src.evaluation import (
    auprc,
    confusion,
    map_entropy,
    metrics,
    metrics_to_dict,
    pr_curve,
    write_pr_csv,
)


def test_confusion_counts_two_by_two_example() -> None:
    cm = confusion(np.array([[0, 0], [1, 1]]), np.array([[0, 1], [1, 1]]))

    assert cm.counts.tolist() == [[1, 1], [0, 2]]


def test_metrics_of_two_by_two_example() -> None:
    result = metrics(confusion(np.array([0, 0, 1, 1]), np.array([0, 1, 1, 1])))

    assert result.oacc == pytest.approx(0.75)
    assert result.iou.tolist() == pytest.approx([0.5, 2 / 3])
    assert result.miou == pytest.approx(7 / 12)
    assert result.macc == pytest.approx(0.75)
    assert result.miou_void_excluded == pytest.approx(2 / 3)


def test_perfect_prediction_scores_one() -> None:
    labels = np.array([1, 2, 2, 3, 0])

    result = metrics(confusion(labels, labels))

    assert result.oacc == 1.0
    assert result.macc == 1.0
    assert result.miou == 1.0


def test_single_class_predicted_wrong_scores_zero() -> None:
    result = metrics(confusion(np.array([2, 2, 2]), np.array([1, 1, 1]), n_classes=3))

    assert result.oacc == 0.0
    assert result.iou[2] == 0.0
    assert math.isnan(result.iou[0])


def test_metrics_match_per_class_oracle() -> None:
    rng = np.random.default_rng(0)
    gt = rng.integers(0, 5, size=(16, 16))
    pred = np.where(rng.random((16, 16)) < 0.7, gt, rng.integers(0, 5, size=(16, 16)))

    result = metrics(confusion(gt, pred, n_classes=5))

    ious, accs = [], []
    for c in range(5):
        inter = np.sum((gt == c) & (pred == c))
        union = np.sum((gt == c) | (pred == c))
        ious.append(inter / union)
        accs.append(inter / np.sum(gt == c))
    assert result.oacc == pytest.approx(np.mean(gt == pred))
    np.testing.assert_allclose(result.iou, ious)
    assert result.miou == pytest.approx(np.mean(ious))
    assert result.macc == pytest.approx(np.mean(accs))


def test_excluded_classes_leave_matrix_and_means() -> None:
    gt = np.array([0, 0, 1, 2])
    pred = np.array([1, 0, 1, 2])

    cm = confusion(gt, pred, n_classes=3, exclude=[0])
    result = metrics(cm)

    assert cm.total == 2
    assert math.isnan(result.iou[0])
    assert result.miou == 1.0


def test_confusion_rejects_out_of_range_class() -> None:
    with pytest.raises(DataError) as excinfo:
        confusion(np.array([0, 4]), np.array([0, 1]), n_classes=3)

    assert "class id 4 is out of range" in str(excinfo.value)


def test_metrics_reject_empty_matrix() -> None:
    with pytest.raises(DataError) as excinfo:
        metrics(confusion(np.array([0, 0]), np.array([0, 0]), exclude=[0]))

    assert "empty" in str(excinfo.value)


def test_metrics_to_dict_names_classes_and_nulls_nan() -> None:
    result = metrics(confusion(np.array([1, 1]), np.array([1, 1]), n_classes=3))

    report = metrics_to_dict(result, ["Void", "Stem"])

    assert report["iou"] == {"Void": None, "Stem": 1.0, "2": None}
    assert report["oAcc"] == 1.0


def test_map_entropy_examples() -> None:
    assert map_entropy(np.full((4, 4), 0.3)) == 0.0
    assert map_entropy(np.arange(256, dtype=np.float64).reshape(16, 16)) == pytest.approx(math.log(256))
    assert map_entropy(np.array([[0.0, 0.0], [1.0, 1.0]])) == pytest.approx(math.log(2))


def test_map_entropy_only_counts_valid_pixels() -> None:
    values = np.array([[0.0, 1.0, 5.0]])
    valid = np.array([[True, True, False]])

    assert map_entropy(values, valid=valid) == pytest.approx(math.log(2))


def test_pr_curve_of_perfect_ranking() -> None:
    errors = np.array([[1, 0], [0, 1]])

    curve = pr_curve(errors.astype(float), errors)

    assert curve.precision.tolist() == [1.0, 1.0, 0.5]
    assert curve.recall.tolist() == [0.0, 1.0, 1.0]
    assert auprc(curve) == pytest.approx(1.0)


def test_pr_curve_of_anti_correlated_score() -> None:
    errors = np.array([1, 0, 0, 1, 0])

    curve = pr_curve(1.0 - errors, errors)

    assert curve.precision[1] == 0.0
    assert curve.recall[1] == 0.0


def test_pr_curve_matches_threshold_oracle() -> None:
    rng = np.random.default_rng(1)
    score = np.round(rng.random((16, 16)), 1)
    errors = (rng.random((16, 16)) < 0.3).astype(np.int64)

    curve = pr_curve(score, errors)

    assert curve.thresholds[0] == math.inf
    for t, p, r in zip(curve.thresholds[1:], curve.precision[1:], curve.recall[1:]):
        flagged = score >= t
        tp = np.sum(flagged & (errors == 1))
        assert p == pytest.approx(tp / flagged.sum())
        assert r == pytest.approx(tp / errors.sum())
    assert len(curve) == len(np.unique(score)) + 1


def test_constant_score_auprc_equals_error_rate() -> None:
    errors = np.zeros((8, 8), dtype=np.int64)
    errors[:2] = 1

    curve = pr_curve(np.zeros((8, 8)), errors)

    assert len(curve) == 2
    assert auprc(curve) == pytest.approx(0.25)


def test_pr_curve_needs_an_error() -> None:
    with pytest.raises(DataError) as excinfo:
        pr_curve(np.ones(3), np.zeros(3))

    assert "no positives" in str(excinfo.value)


def test_write_pr_csv(tmp_path: Path) -> None:
    curve = pr_curve(np.array([0.9, 0.1]), np.array([1, 0]))
    path = tmp_path / "eval" / "pr.csv"

    write_pr_csv(curve, path)

    with path.open(encoding="utf-8") as handle:
        rows = list(csv.reader(handle))
    assert rows[0] == ["threshold", "precision", "recall"]
    assert rows[1] == ["inf", "1.0", "0.0"]
    assert len(rows) == 4
