"""Plain-text metric tables."""

from __future__ import annotations

import math
from typing import Any, Mapping, Sequence

_SUMMARY_COLUMNS = ("oAcc", "mAcc", "mIoU", "mIoU Void excl.")
_SUMMARY_KEYS = ("oAcc", "mAcc", "mIoU", "mIoU_void_excluded")


def _cell(value: Any) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "n/a"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def _table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> list[str]:
    widths = [len(h) for h in header]
    for row in rows:
        widths = [max(w, len(c)) for w, c in zip(widths, row)]
    lines = ["  ".join(h.rjust(w) if i else h.ljust(w) for i, (h, w) in enumerate(zip(header, widths)))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(row, widths))))
    return lines


def render_metrics_table(title: str, report: Mapping[str, Any]) -> str:
    """One scan's metrics: the summary row, then per-class IoU and accuracy."""
    lines = [title, ""]
    lines.extend(_table(_SUMMARY_COLUMNS, [[_cell(report.get(k)) for k in _SUMMARY_KEYS]]))
    lines.append("")
    iou = report.get("iou", {})
    acc = report.get("class_acc", {})
    rows = [[name, _cell(iou.get(name)), _cell(acc.get(name))] for name in iou]
    lines.extend(_table(("class", "IoU", "Acc"), rows))

    extras = [(k, report[k]) for k in ("map_entropy", "auprc") if k in report]
    if extras:
        lines.append("")
        for key, value in extras:
            lines.append(f"{key}: {_cell(value)}")
    return "\n".join(lines).rstrip() + "\n"


def render_summary_table(reports: Mapping[str, Mapping[str, Any]]) -> str:
    header = ("scan",) + _SUMMARY_COLUMNS + ("AUPRC",)
    rows = [
        [scan] + [_cell(report.get(k)) for k in _SUMMARY_KEYS] + [_cell(report.get("auprc"))]
        for scan, report in reports.items()
    ]
    if not rows:
        return "No scans evaluated\n"
    return "\n".join(_table(header, rows)) + "\n"
