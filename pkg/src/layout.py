"""Per-scan artifact layout: <output>/<scan_id>/<stage>/."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

from .errors import DataError

STAGES = ("project", "featurize", "fuse", "refine", "sphere", "eval")


def scan_id(path: Path) -> str:
    return Path(path).stem


def discover_scans(input_dir: Path, pattern: str = "*.ply") -> list[Path]:
    input_dir = Path(input_dir)
    if not input_dir.is_dir():
        raise DataError(f"input directory {input_dir} does not exist")
    scans = sorted(p for p in input_dir.glob(pattern) if p.is_file())
    if not scans:
        raise DataError(f"found 0 scans matching '{pattern}' in {input_dir}")
    return scans


def stage_dir(output_dir: Path, scan: str, stage: str, create: bool = False) -> Path:
    if stage not in STAGES:
        raise ValueError(f"unknown stage '{stage}'")
    path = Path(output_dir) / scan / stage
    if create:
        path.mkdir(parents=True, exist_ok=True)
    return path


def require(path: Path, stage: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing {stage} output {path}; run '{stage}' first")
    return path


def write_json(path: Path, payload: Any) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path: Path) -> Any:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path.name}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
