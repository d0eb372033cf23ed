"""Pipeline configuration loading and validation."""

from __future__ import annotations

import copy
import logging
from pathlib import Path
from typing import Any, Callable, Mapping

import yaml

from .errors import ConfigError
from .features import resolve_feature_set

_LOGGER = logging.getLogger(__name__)

CONFIG_VERSION = 1

DEFAULTS: dict[str, Any] = {
    "version": CONFIG_VERSION,
    "seed": 42,
    "workers": 1,
    "io": {
        "input_dir": "data/scans",
        "scan_glob": "*.ply",
        "output_dir": "output",
        "gt_dir": None,
        "logits_dir": None,
        "train_mask_dir": None,
    },
    "grid": {"step_deg": 0.25, "theta_deg": [0.0, 135.0], "phi_deg": [0.0, 360.0]},
    "preprocessing": {"percentiles": [1.0, 99.0]},
    "radius": {
        "lambda": 1.5,
        "k_ref": 10,
        "r_min": 0.02,
        "r_max": 0.3,
        "max_neighbors": 32,
        "batch_points": 65536,
    },
    "features": {"set": "IRZ_N3_CAP", "preview": True},
    "reduction": {
        "fit_scope": "scan",
        "components": 3,
        "ica_max_iter": 500,
        "ica_tol": 1e-6,
        "mnf_ridge": 1e-6,
    },
    "tiling": {"n_tiles": 5, "buffer": 32, "merge_order": "fuse_then_merge"},
    "ensemble": {
        "members": 3,
        "seed_fraction": 0.05,
        "n_trees": 25,
        "max_depth": 12,
        "pseudo_confidence": 0.9,
        "pseudo_max_epistemic": 0.05,
    },
    "refinement": {
        "k_vote": 9,
        "tau": 0.8,
        "scales": [0.05, 0.15, 0.30],
        "n_trees": 100,
        "max_depth": 20,
        "relabel_void": False,
        "reproject": True,
    },
    "sphere": {
        "resolution_deg": 1.0,
        "radius": 1.0,
        "theta_deg": [0.0, 135.0],
        "phi_deg": [0.0, 360.0],
        "feature_set": "IRZ",
    },
    "evaluation": {"exclude": [], "bins": 256},
}


def _load_yaml(path: Path) -> dict[str, Any]:
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path.name} is not valid YAML/JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path.name} must contain a mapping at the top level")
    return data


def _warn_unknown(where: str, key: str) -> None:
    _LOGGER.warning("Ignoring unknown config key '%s' in %s", key, where)


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _positive_int(value: Any) -> bool:
    return _is_int(value) and value > 0


def _non_negative_int(value: Any) -> bool:
    return _is_int(value) and value >= 0


def _positive_number(value: Any) -> bool:
    return _is_number(value) and value > 0


def _unit_interval(value: Any) -> bool:
    return _is_number(value) and 0 < value <= 1


def _optional_depth(value: Any) -> bool:
    return value is None or _positive_int(value)


def _optional_str(value: Any) -> bool:
    return value is None or (isinstance(value, str) and bool(value))


def _span(value: Any) -> bool:
    return (
        isinstance(value, list)
        and len(value) == 2
        and all(_is_number(v) for v in value)
        and value[0] < value[1]
    )


def _percentiles(value: Any) -> bool:
    return _span(value) and 0 <= value[0] and value[1] <= 100


def _radii(value: Any) -> bool:
    return isinstance(value, list) and bool(value) and all(_positive_number(v) for v in value)


def _class_ids(value: Any) -> bool:
    return isinstance(value, list) and all(_non_negative_int(v) for v in value)


def _one_of(*choices: str) -> Callable[[Any], bool]:
    return lambda value: value in choices


_CHECKS: dict[str, dict[str, tuple[Callable[[Any], bool], str]]] = {
    "io": {
        "input_dir": (lambda v: isinstance(v, str) and bool(v), "must be a path"),
        "scan_glob": (lambda v: isinstance(v, str) and bool(v), "must be a glob pattern"),
        "output_dir": (lambda v: isinstance(v, str) and bool(v), "must be a path"),
        "gt_dir": (_optional_str, "must be a path or null"),
        "logits_dir": (_optional_str, "must be a path or null"),
        "train_mask_dir": (_optional_str, "must be a path or null"),
    },
    "grid": {
        "step_deg": (_positive_number, "must be a positive number"),
        "theta_deg": (_span, "must be an increasing [min, max] pair"),
        "phi_deg": (_span, "must be an increasing [min, max] pair"),
    },
    "preprocessing": {
        "percentiles": (_percentiles, "must be [lo, hi] with 0 <= lo < hi <= 100"),
    },
    "radius": {
        "lambda": (_positive_number, "must be a positive number"),
        "k_ref": (_positive_int, "must be a positive int"),
        "r_min": (_positive_number, "must be a positive number"),
        "r_max": (_positive_number, "must be a positive number"),
        "max_neighbors": (lambda v: _is_int(v) and v >= 2, "must be an int >= 2"),
        "batch_points": (_positive_int, "must be a positive int"),
    },
    "features": {
        "set": (lambda v: isinstance(v, str), "must be a feature-set name"),
        "preview": (lambda v: isinstance(v, bool), "must be boolean"),
    },
    "reduction": {
        "fit_scope": (_one_of("scan", "corpus"), "must be 'scan' or 'corpus'"),
        "components": (_positive_int, "must be a positive int"),
        "ica_max_iter": (_positive_int, "must be a positive int"),
        "ica_tol": (_positive_number, "must be a positive number"),
        "mnf_ridge": (_positive_number, "must be a positive number"),
    },
    "tiling": {
        "n_tiles": (_positive_int, "must be a positive int"),
        "buffer": (_non_negative_int, "must be a non-negative int"),
        "merge_order": (
            _one_of("fuse_then_merge", "merge_then_fuse"),
            "must be 'fuse_then_merge' or 'merge_then_fuse'",
        ),
    },
    "ensemble": {
        "members": (_positive_int, "must be a positive int"),
        "seed_fraction": (_unit_interval, "must lie in (0, 1]"),
        "n_trees": (_positive_int, "must be a positive int"),
        "max_depth": (_optional_depth, "must be a positive int or null"),
        "pseudo_confidence": (_unit_interval, "must lie in (0, 1]"),
        "pseudo_max_epistemic": (lambda v: _is_number(v) and v >= 0, "must be >= 0"),
    },
    "refinement": {
        "k_vote": (_positive_int, "must be a positive int"),
        "tau": (_unit_interval, "must lie in (0, 1]"),
        "scales": (_radii, "must be a nonempty list of positive radii"),
        "n_trees": (_positive_int, "must be a positive int"),
        "max_depth": (_optional_depth, "must be a positive int or null"),
        "relabel_void": (lambda v: isinstance(v, bool), "must be boolean"),
        "reproject": (lambda v: isinstance(v, bool), "must be boolean"),
    },
    "sphere": {
        "resolution_deg": (_positive_number, "must be a positive number"),
        "radius": (_positive_number, "must be a positive number"),
        "theta_deg": (_span, "must be an increasing [min, max] pair"),
        "phi_deg": (_span, "must be an increasing [min, max] pair"),
        "feature_set": (lambda v: isinstance(v, str), "must be a feature-set name or 'labels'"),
    },
    "evaluation": {
        "exclude": (_class_ids, "must be a list of class ids"),
        "bins": (lambda v: _is_int(v) and v >= 2, "must be an int >= 2"),
    },
}


def _apply_overrides(raw: dict[str, Any], overrides: Mapping[str, Any]) -> None:
    for dotted, value in overrides.items():
        if value is None:
            continue
        *sections, key = dotted.split(".")
        target = raw
        for section in sections:
            node = target.get(section)
            if not isinstance(node, dict):
                node = {}
                target[section] = node
            target = node
        target[key] = value


def validate_config(raw: Mapping[str, Any], source: str = "config") -> dict[str, Any]:
    if raw.get("version") != CONFIG_VERSION:
        raise ConfigError(f"{source}: 'version' must be {CONFIG_VERSION}, got {raw.get('version')!r}")

    config = copy.deepcopy(DEFAULTS)
    for key, value in raw.items():
        if key == "version":
            continue
        if key in ("seed", "workers"):
            config[key] = value
            continue
        if key not in _CHECKS:
            _warn_unknown(source, key)
            continue
        if not isinstance(value, dict):
            raise ConfigError(f"{source}: section '{key}' must be a mapping")
        for name, item in value.items():
            if name not in _CHECKS[key]:
                _warn_unknown(f"{source} section '{key}'", name)
                continue
            config[key][name] = item

    if not _non_negative_int(config["seed"]):
        raise ConfigError(f"{source}: 'seed' must be a non-negative int")
    if not _positive_int(config["workers"]):
        raise ConfigError(f"{source}: 'workers' must be a positive int")
    for section, checks in _CHECKS.items():
        for name, (check, reason) in checks.items():
            if not check(config[section][name]):
                raise ConfigError(
                    f"{source}: {section}.{name} {reason}, got {config[section][name]!r}"
                )

    radius = config["radius"]
    if radius["r_min"] > radius["r_max"]:
        raise ConfigError(f"{source}: radius.r_min must not exceed radius.r_max")
    try:
        config["features"]["set"] = resolve_feature_set(config["features"]["set"])
        if config["sphere"]["feature_set"] != "labels":
            config["sphere"]["feature_set"] = resolve_feature_set(config["sphere"]["feature_set"])
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    return config


def load_config(path: Path | None, overrides: Mapping[str, Any] | None = None) -> dict[str, Any]:
    raw: dict[str, Any] = {"version": CONFIG_VERSION}
    source = "defaults"
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        raw = _load_yaml(path)
        source = path.name
    if overrides:
        _apply_overrides(raw, overrides)
    return validate_config(raw, source)
