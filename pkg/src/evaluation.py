"""Segmentation metrics, map entropy and uncertainty-error PR curves."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    counts: np.ndarray
    excluded: tuple[int, ...] = ()

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class Metrics:
    oacc: float
    macc: float
    miou: float
    miou_void_excluded: float
    class_acc: np.ndarray
    iou: np.ndarray


@dataclass(frozen=True)
class PRCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray

    def __len__(self) -> int:
        return len(self.thresholds)


def confusion(
    gt: np.ndarray,
    pred: np.ndarray,
    n_classes: int | None = None,
    exclude: Iterable[int] = (),
) -> ConfusionMatrix:
    gt = np.asarray(gt, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if gt.shape != pred.shape:
        raise DataError(f"ground truth {gt.shape} and prediction {pred.shape} differ in shape")
    if gt.size and (gt.min() < 0 or pred.min() < 0):
        raise DataError("class ids must be non-negative")
    largest = int(max(gt.max(initial=0), pred.max(initial=0)))
    if n_classes is None:
        n_classes = largest + 1
    elif largest >= n_classes:
        raise DataError(f"class id {largest} is out of range for {n_classes} classes")

    excluded = tuple(sorted(set(int(c) for c in exclude)))
    keep = ~np.isin(gt, excluded)
    flat = gt[keep] * n_classes + pred[keep]
    counts = np.bincount(flat.ravel(), minlength=n_classes * n_classes)
    return ConfusionMatrix(counts.reshape(n_classes, n_classes), excluded)


def _nanmean(values: np.ndarray) -> float:
    defined = values[~np.isnan(values)]
    return float(defined.mean()) if defined.size else math.nan


def metrics(cm: ConfusionMatrix) -> Metrics:
    """Accuracy and IoU; classes without support or predictions are NaN and left out of means."""
    if cm.total == 0:
        raise DataError("confusion matrix is empty")
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    support = counts.sum(axis=1)
    predicted = counts.sum(axis=0)
    union = support + predicted - tp

    class_acc = np.full(cm.n_classes, math.nan)
    has_support = support > 0
    class_acc[has_support] = tp[has_support] / support[has_support]

    iou = np.full(cm.n_classes, math.nan)
    seen = union > 0
    iou[seen] = tp[seen] / union[seen]
    for c in cm.excluded:
        if c < cm.n_classes:
            class_acc[c] = math.nan
            iou[c] = math.nan

    return Metrics(
        oacc=float(tp.sum() / counts.sum()),
        macc=_nanmean(class_acc),
        miou=_nanmean(iou),
        miou_void_excluded=_nanmean(iou[1:]),
        class_acc=class_acc,
        iou=iou,
    )


def map_entropy(values: np.ndarray, bins: int = 256, valid: np.ndarray | None = None) -> float:
    values = np.asarray(values, dtype=np.float64)
    if bins < 2:
        raise DataError(f"map entropy needs at least 2 bins, got {bins}")
    inside = values[np.asarray(valid, dtype=bool)] if valid is not None else values.ravel()
    if inside.size == 0:
        raise DataError("cannot compute the entropy of an all-void map")
    if not np.all(np.isfinite(inside)):
        raise DataError("map contains non-finite values")
    lo, hi = float(inside.min()), float(inside.max())
    if hi <= lo:
        return 0.0
    hist, _ = np.histogram(inside, bins=bins, range=(lo, hi))
    p = hist[hist > 0] / inside.size
    return float(-(p * np.log(p)).sum())


def pr_curve(score: np.ndarray, error_mask: np.ndarray, valid: np.ndarray | None = None) -> PRCurve:
    """Exact curve at every distinct score, anchored with a recall-0 entry."""
    score = np.asarray(score, dtype=np.float64)
    error_mask = np.asarray(error_mask)
    if score.shape != error_mask.shape:
        raise DataError(f"score {score.shape} and error mask {error_mask.shape} differ in shape")
    if not np.isin(error_mask, (0, 1)).all():
        raise DataError("error mask must be binary")
    keep = np.ones(score.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    s = score[keep]
    target = error_mask[keep].astype(np.int64)
    positives = int(target.sum())
    if positives == 0:
        raise DataError("error mask has no positives")

    order = np.argsort(-s, kind="stable")
    s = s[order]
    hits = np.cumsum(target[order])
    # last index of each run of tied scores
    last = np.flatnonzero(np.append(s[:-1] != s[1:], True))
    predicted = last + 1
    tp = hits[last]
    precision = tp / predicted
    recall = tp / positives

    return PRCurve(
        thresholds=np.concatenate([[math.inf], s[last]]),
        precision=np.concatenate([[precision[0]], precision]),
        recall=np.concatenate([[0.0], recall]),
    )


def auprc(curve: PRCurve) -> float:
    if len(curve) < 2:
        raise DataError("AUPRC needs at least 2 curve points")
    steps = np.diff(curve.recall)
    return float(np.sum(steps * curve.precision[1:]))


def write_pr_csv(curve: PRCurve, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["threshold", "precision", "recall"])
        for t, p, r in zip(curve.thresholds, curve.precision, curve.recall):
            writer.writerow([repr(float(t)), repr(float(p)), repr(float(r))])


def _json_float(value: float) -> float | None:
    return None if math.isnan(value) else float(value)


def metrics_to_dict(result: Metrics, class_names: Sequence[str]) -> dict[str, Any]:
    def name(c: int) -> str:
        return class_names[c] if c < len(class_names) else str(c)

    return {
        "oAcc": _json_float(result.oacc),
        "mAcc": _json_float(result.macc),
        "mIoU": _json_float(result.miou),
        "mIoU_void_excluded": _json_float(result.miou_void_excluded),
        "class_acc": {name(c): _json_float(v) for c, v in enumerate(result.class_acc)},
        "iou": {name(c): _json_float(v) for c, v in enumerate(result.iou)},
    }
