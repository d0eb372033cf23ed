"""Pipeline stages, one function per subcommand."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import layout
from .ensemble import (
    LogitStack,
    baseline_logits,
    combined_loss,
    fuse,
    fuse_tiles,
    load_logits,
    pseudo_labels,
    rank_queries,
    train_baseline,
    uncertainty,
)
from .errors import DataError
from .evaluation import (
    ConfusionMatrix,
    auprc,
    confusion,
    map_entropy,
    metrics,
    metrics_to_dict,
    pr_curve,
    write_pr_csv,
)
from .features import (
    BASE_PARTS,
    FEATURE_SETS,
    REDUCTION_INPUT,
    STAT_PARTS,
    FeatureCube,
    base_parts,
    build_feature_set,
    eigen_descriptors,
    load_cube,
    save_cube,
    stack,
    tile,
)
from .pointcloud import AdaptiveRadiusSpec, PointCloud, SpatialIndex, load_ply, save_ply
from .previews import (
    feature_preview,
    label_palette_image,
    read_label_png,
    uncertainty_preview,
    write_label_png,
    write_png,
)
from .projection import (
    GridSpec,
    ProjectionIndex,
    VirtualSphereSpec,
    back_project,
    colorize_points,
    density_map,
    load_index,
    project,
    rasterize_channel,
    save_index,
    virtual_sphere,
)
from .reduction import concat_cubes, fit, save_model, transform
from .refine import RefinementConfig, refine_labels
from .render_report import render_metrics_table, render_summary_table
from .synthetic import write_bundled_scans

_LOGGER = logging.getLogger(__name__)

Summary = dict[str, dict[str, Any]]

_UNCERTAINTY_CHANNELS = ("total", "expected", "epistemic")

_PART_CHANNELS = {
    "IRZ_RAW": ("I_raw", "R_raw", "Z_raw"),
    "IRZ": ("I", "R", "Z"),
    "CAP": ("C", "A", "P"),
    "N3": ("N_r", "N_g", "N_b"),
}


def grid_from_config(config: dict[str, Any]) -> GridSpec:
    grid = config["grid"]
    return GridSpec.from_degrees(grid["step_deg"], grid["theta_deg"], grid["phi_deg"])


def _radius_spec(config: dict[str, Any]) -> AdaptiveRadiusSpec:
    radius = config["radius"]
    return AdaptiveRadiusSpec(radius["lambda"], radius["k_ref"], radius["r_min"], radius["r_max"])


def _output(config: dict[str, Any]) -> Path:
    return Path(config["io"]["output_dir"])


def _scan_paths(config: dict[str, Any]) -> list[Path]:
    return layout.discover_scans(Path(config["io"]["input_dir"]), config["io"]["scan_glob"])


def _for_each_scan(
    config: dict[str, Any], work: Callable[[str, Path], dict[str, Any]]
) -> Summary:
    scans = _scan_paths(config)
    with ThreadPoolExecutor(max_workers=config["workers"]) as pool:
        results = list(pool.map(lambda p: work(layout.scan_id(p), p), scans))
    return {layout.scan_id(p): result for p, result in zip(scans, results)}


def _stage(config: dict[str, Any], scan: str, stage: str, create: bool = False) -> Path:
    return layout.stage_dir(_output(config), scan, stage, create)


def _load_index(config: dict[str, Any], scan: str) -> ProjectionIndex:
    path = layout.require(_stage(config, scan, "project") / "index.npz", "project")
    index = load_index(path)
    if index.grid.shape != grid_from_config(config).shape:
        raise DataError(
            f"{scan}: stored projection grid {index.grid.shape} differs from the configured grid"
        )
    return index


def _load_scan(path: Path, index: ProjectionIndex | None = None) -> PointCloud:
    cloud = load_ply(path)
    if index is not None and index.n_points != len(cloud):
        raise DataError(
            f"{path.name}: cloud has {len(cloud)} points but its projection has {index.n_points}"
        )
    return cloud


def _density_report(index: ProjectionIndex) -> dict[str, Any]:
    density = density_map(index)
    counts = density.counts
    return {
        "shape": list(index.grid.shape),
        "points": index.n_points,
        "in_grid": int(index.in_grid.sum()),
        "out_of_grid": int((~index.in_grid).sum()),
        "occupied_pixels": int((counts > 0).sum()),
        "multi_point_pixels": int((counts > 1).sum()),
        "max_per_pixel": int(counts.max(initial=0)),
        "mode": density.mode,
        "histogram": density.histogram.tolist(),
    }


def _write_density(config: dict[str, Any], scan: str, index: ProjectionIndex) -> dict[str, Any]:
    out = _stage(config, scan, "project", create=True)
    report = _density_report(index)
    layout.write_json(out / "density.json", report)
    counts = index.counts().astype(np.float64)
    write_png(uncertainty_preview(counts, counts > 0), out / "density.png")
    return report


def cmd_project(config: dict[str, Any]) -> Summary:
    grid = grid_from_config(config)

    def work(scan: str, path: Path) -> dict[str, Any]:
        cloud = _load_scan(path)
        index = project(cloud, grid)
        out = _stage(config, scan, "project", create=True)
        save_index(index, out / "index.npz")
        report = _write_density(config, scan, index)

        z = cloud.xyz[:, 2] - cloud.origin[2]
        intensity = cloud.intensity if cloud.intensity is not None else np.zeros(len(cloud))
        raw = np.stack(
            [
                rasterize_channel(index, intensity),
                rasterize_channel(index, index.ranges),
                rasterize_channel(index, z),
            ]
        )
        save_cube(FeatureCube(("I_raw", "R_raw", "Z_raw"), raw, index.counts() > 0), out / "raw.fcub")
        return {
            "points": report["points"],
            "in_grid": report["in_grid"],
            "occupied": report["occupied_pixels"],
            "mode": report["mode"],
        }

    return _for_each_scan(config, work)


def cmd_density(config: dict[str, Any]) -> Summary:
    def work(scan: str, path: Path) -> dict[str, Any]:
        report = _write_density(config, scan, _load_index(config, scan))
        return {
            "occupied": report["occupied_pixels"],
            "multi": report["multi_point_pixels"],
            "max": report["max_per_pixel"],
            "mode": report["mode"],
        }

    return _for_each_scan(config, work)


def _base_cube(config: dict[str, Any], scan: str, path: Path) -> FeatureCube:
    index = _load_index(config, scan)
    cloud = _load_scan(path, index)
    radius = config["radius"]
    spatial = SpatialIndex.from_cloud(cloud, config["workers"])
    eigen = eigen_descriptors(
        cloud,
        spatial,
        _radius_spec(config),
        radius["max_neighbors"],
        radius["batch_points"],
        config["workers"],
    )
    parts = base_parts(cloud, index, eigen, config["preprocessing"]["percentiles"])
    cube = stack(*(parts[name] for name in BASE_PARTS))
    save_cube(cube, _stage(config, scan, "featurize", create=True) / "base.fcub")
    return cube


def _split_parts(cube: FeatureCube, valid: np.ndarray) -> dict[str, FeatureCube]:
    groups: dict[str, list[str]] = {}
    for name in cube.names:
        part = next((p for p, channels in _PART_CHANNELS.items() if name in channels), None)
        if part is None:
            part = next((p for p in STAT_PARTS if name.startswith(p)), None)
        if part is not None:
            groups.setdefault(part, []).append(name)
    return {part: cube.select(names, valid) for part, names in groups.items()}


def _load_parts(config: dict[str, Any], scan: str) -> dict[str, FeatureCube]:
    out = _stage(config, scan, "featurize")
    base = load_cube(layout.require(out / "base.fcub", "featurize"))
    parts = _split_parts(base, base.valid_mask)
    stats = out / "stats.fcub"
    if stats.exists():
        parts.update(_split_parts(load_cube(stats), base.valid_mask))
    return parts


def _reduce(
    config: dict[str, Any], bases: dict[str, FeatureCube], kinds: tuple[str, ...]
) -> dict[str, dict[str, FeatureCube]]:
    """Fit the statistical trios and write stats.fcub per scan."""
    reduction = config["reduction"]
    options = {
        "ridge": reduction["mnf_ridge"],
        "max_iter": reduction["ica_max_iter"],
        "tol": reduction["ica_tol"],
    }
    inputs = {scan: _split_parts(cube, cube.valid_mask) for scan, cube in bases.items()}
    inputs = {scan: build_feature_set(REDUCTION_INPUT, parts) for scan, parts in inputs.items()}

    models: dict[str, dict[str, Any]] = {scan: {} for scan in inputs}
    for kind in kinds:
        if reduction["fit_scope"] == "corpus":
            model = fit(kind, concat_cubes(list(inputs.values())), reduction["components"], config["seed"], **options)
            save_model(model, _output(config) / "corpus" / f"{kind.lower()}.json")
            for scan in inputs:
                models[scan][kind] = model
        else:
            for scan, cube in inputs.items():
                model = fit(kind, cube, reduction["components"], config["seed"], **options)
                save_model(model, _stage(config, scan, "featurize", create=True) / f"{kind.lower()}.json")
                models[scan][kind] = model

    result: dict[str, dict[str, FeatureCube]] = {}
    for scan, cube in inputs.items():
        stat_parts = {kind: transform(models[scan][kind], cube) for kind in kinds}
        save_cube(
            stack(*stat_parts.values()),
            _stage(config, scan, "featurize", create=True) / "stats.fcub",
        )
        result[scan] = stat_parts
    return result


def _write_feature_previews(config: dict[str, Any], scan: str, parts: dict[str, FeatureCube]) -> None:
    out = _stage(config, scan, "featurize", create=True) / "previews"
    for name, part in parts.items():
        if name == "IRZ_RAW":
            continue
        write_png(feature_preview(part), out / f"{name.lower()}.png")


def cmd_featurize(config: dict[str, Any]) -> Summary:
    feature_set = config["features"]["set"]
    needed = tuple(p for p in FEATURE_SETS[feature_set] if p in STAT_PARTS)
    scans = {layout.scan_id(p): p for p in _scan_paths(config)}

    with ThreadPoolExecutor(max_workers=config["workers"]) as pool:
        cubes = list(pool.map(lambda item: _base_cube(config, *item), scans.items()))
    bases = dict(zip(scans, cubes))
    stats = _reduce(config, bases, needed) if needed else {scan: {} for scan in bases}

    summary: Summary = {}
    for scan, base in bases.items():
        parts = _split_parts(base, base.valid_mask)
        parts.update(stats[scan])
        cube = build_feature_set(feature_set, parts)
        out = _stage(config, scan, "featurize", create=True)
        save_cube(cube, out / "features.fcub")
        if config["features"]["preview"]:
            _write_feature_previews(config, scan, parts)
            shown = cube.names[:3] if cube.n_channels >= 3 else cube.names[:1]
            write_png(feature_preview(cube, shown), out / "features.png")
        summary[scan] = {"set": feature_set, "channels": cube.n_channels, "valid": int(cube.valid_mask.sum())}
    return summary


def cmd_reduce(config: dict[str, Any]) -> Summary:
    scans = [layout.scan_id(p) for p in _scan_paths(config)]
    bases = {
        scan: load_cube(layout.require(_stage(config, scan, "featurize") / "base.fcub", "featurize"))
        for scan in scans
    }
    stats = _reduce(config, bases, STAT_PARTS)
    return {
        scan: {"kinds": ",".join(parts), "components": config["reduction"]["components"]}
        for scan, parts in stats.items()
    }


def _rasterized_labels(cloud: PointCloud, index: ProjectionIndex) -> np.ndarray | None:
    if cloud.labels is None:
        return None
    labels = rasterize_channel(index, cloud.labels.astype(np.float64)).astype(np.int64)
    labels[index.counts() == 0] = 0
    return labels


def _seed_mask(labels: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """Stratified sample of labeled pixels, at least one per class."""
    rng = np.random.default_rng(seed)
    mask = np.zeros_like(labels)
    for class_id in np.unique(labels[labels > 0]):
        ids = np.flatnonzero(labels.ravel() == class_id)
        n = max(1, math.ceil(fraction * len(ids)))
        chosen = np.sort(rng.choice(ids, size=n, replace=False))
        mask.ravel()[chosen] = class_id
    return mask


def _train_mask(config: dict[str, Any], scan: str, cloud: PointCloud, index: ProjectionIndex) -> np.ndarray:
    mask_dir = config["io"]["train_mask_dir"]
    if mask_dir:
        path = Path(mask_dir) / f"{scan}.png"
        if path.exists():
            return read_label_png(path, index.grid.shape)
        _LOGGER.warning("No training mask %s; sampling seed labels from the scan", path)
    labels = _rasterized_labels(cloud, index)
    if labels is None:
        raise DataError(f"{scan}: no training mask and the scan carries no labels")
    return _seed_mask(labels, config["ensemble"]["seed_fraction"], config["seed"])


def _external_logits(config: dict[str, Any], scan: str, logits_dir: Path, shape: tuple[int, int]) -> LogitStack:
    files = sorted(Path(logits_dir).glob(f"{scan}*.lgts"))
    if not files:
        raise DataError(f"{scan}: no logit stacks found in {logits_dir}")
    stacks = [load_logits(f) for f in files]
    for f, s in zip(files, stacks):
        if s.shape != shape or s.n_classes != stacks[0].n_classes:
            raise DataError(
                f"{scan}: {f.name} has {s.n_classes} classes at {s.shape}, "
                f"expected {stacks[0].n_classes} classes at {shape} like {files[0].name}"
            )
    return LogitStack(np.concatenate([s.logits for s in stacks]))


def cmd_fuse(config: dict[str, Any], baseline: bool = False, logits_dir: str | None = None) -> Summary:
    logits_dir = logits_dir or config["io"]["logits_dir"]
    use_baseline = baseline or not logits_dir
    ens = config["ensemble"]
    tiling = config["tiling"]

    def work(scan: str, path: Path) -> dict[str, Any]:
        index = _load_index(config, scan)
        cloud = _load_scan(path, index)
        cube = load_cube(layout.require(_stage(config, scan, "featurize") / "features.fcub", "featurize"))
        valid = index.counts() > 0
        cube = FeatureCube(cube.names, cube.data, valid)
        out = _stage(config, scan, "fuse", create=True)
        n_classes = cloud.meta.n_classes
        report: dict[str, Any] = {"source": "baseline" if use_baseline else "logits"}

        if use_baseline:
            train = _train_mask(config, scan, cloud, index)
            write_label_png(train, out / "train_mask.png")
            forests = train_baseline(
                cube, train, ens["members"], config["seed"], ens["n_trees"], ens["max_depth"], config["workers"]
            )
            tiles = tile(cube, tiling["n_tiles"], tiling["buffer"])
            stacks = [baseline_logits(forests, part.image, n_classes) for part in tiles.tiles]
            probabilities, labels, maps = fuse_tiles(stacks, tiles, tiling["merge_order"])
            report["queries"] = rank_queries(maps.epistemic, tiles)
            seeded = (train > 0) & valid
            report["train_loss"] = combined_loss(probabilities, train, seeded)
            report["members"] = ens["members"]
        else:
            logit_stack = _external_logits(config, scan, Path(logits_dir), index.grid.shape)
            probabilities, labels = fuse(logit_stack)
            maps = uncertainty(logit_stack)
            report["members"] = logit_stack.n_models

        labels = np.where(valid, labels, 0)
        pseudo = pseudo_labels(probabilities, maps, ens["pseudo_confidence"], ens["pseudo_max_epistemic"], valid)
        write_label_png(labels, out / "labels.png")
        write_label_png(pseudo, out / "pseudo_labels.png")
        write_png(label_palette_image(labels, cloud.meta.class_names), out / "previews" / "labels.png")
        uncertainty_cube = maps.as_cube(valid)
        save_cube(uncertainty_cube, out / "uncertainty.fcub")
        for name in _UNCERTAINTY_CHANNELS:
            write_png(uncertainty_preview(uncertainty_cube.channel(name), valid), out / "previews" / f"{name}.png")

        bins = config["evaluation"]["bins"]
        report["entropy"] = {
            name: map_entropy(uncertainty_cube.channel(name), bins, valid) for name in _UNCERTAINTY_CHANNELS
        }
        report["mean"] = {name: float(uncertainty_cube.channel(name)[valid].mean()) for name in _UNCERTAINTY_CHANNELS}
        report["pseudo_labeled"] = int((pseudo > 0).sum())
        layout.write_json(out / "entropy.json", report)
        return {
            "members": report["members"],
            "pseudo_labeled": report["pseudo_labeled"],
            "mean_epistemic": round(report["mean"]["epistemic"], 6),
        }

    return _for_each_scan(config, work)


def _fused_labels(config: dict[str, Any], scan: str, shape: tuple[int, int]) -> np.ndarray:
    path = layout.require(_stage(config, scan, "fuse") / "labels.png", "fuse")
    return read_label_png(path, shape)


def cmd_backproject(config: dict[str, Any]) -> Summary:
    def work(scan: str, path: Path) -> dict[str, Any]:
        index = _load_index(config, scan)
        cloud = _load_scan(path, index)
        labels = back_project(index, _fused_labels(config, scan, index.grid.shape))
        out = _stage(config, scan, "refine", create=True)
        save_ply(cloud.with_labels(labels), out / "backprojected.ply")
        return {"points": len(cloud), "labeled": int((labels > 0).sum())}

    return _for_each_scan(config, work)


def _refinement_config(config: dict[str, Any]) -> RefinementConfig:
    ref = config["refinement"]
    return RefinementConfig(
        k_vote=ref["k_vote"],
        tau=ref["tau"],
        scales=tuple(ref["scales"]),
        n_trees=ref["n_trees"],
        max_depth=ref["max_depth"],
        relabel_void=ref["relabel_void"],
        seed=config["seed"],
        max_neighbors=config["radius"]["max_neighbors"],
        batch_points=config["radius"]["batch_points"],
    )


def cmd_refine(config: dict[str, Any]) -> Summary:
    settings = _refinement_config(config)

    def work(scan: str, path: Path) -> dict[str, Any]:
        index = _load_index(config, scan)
        cloud = _load_scan(path, index)
        y = back_project(index, _fused_labels(config, scan, index.grid.shape))
        projected = cloud.with_labels(y)
        spatial = SpatialIndex.from_cloud(projected, config["workers"])
        final, report = refine_labels(projected, spatial, settings, config["workers"])

        out = _stage(config, scan, "refine", create=True)
        save_ply(projected.with_labels(final), out / "labeled.ply")
        if config["refinement"]["reproject"]:
            mask = rasterize_channel(index, final.astype(np.float64)).astype(np.int64)
            write_label_png(np.where(index.counts() > 0, mask, 0), out / "labels_2d.png")
        layout.write_json(out / "report.json", report)
        return {
            "core": report["core"],
            "suspects": report["suspects"],
            "adoptions": report["forest_adoptions"],
            "skipped": report["forest_skipped"],
        }

    return _for_each_scan(config, work)


def _sphere_colors(config: dict[str, Any], scan: str, cloud: PointCloud, shape: tuple[int, int]) -> np.ndarray:
    source = config["sphere"]["feature_set"]
    if source == "labels":
        reprojected = _stage(config, scan, "refine") / "labels_2d.png"
        path = reprojected if reprojected.exists() else _stage(config, scan, "fuse") / "labels.png"
        labels = read_label_png(layout.require(path, "fuse"), shape)
        return label_palette_image(labels, cloud.meta.class_names)
    cube = build_feature_set(source, _load_parts(config, scan))
    channels = cube.names[:3] if cube.n_channels >= 3 else cube.names[:1]
    return feature_preview(cube, channels)


def cmd_sphere(config: dict[str, Any]) -> Summary:
    grid = grid_from_config(config)
    sphere = config["sphere"]
    spec = VirtualSphereSpec(
        sphere["resolution_deg"], sphere["radius"], tuple(sphere["theta_deg"]), tuple(sphere["phi_deg"])
    )

    def work(scan: str, path: Path) -> dict[str, Any]:
        index = _load_index(config, scan)
        cloud = _load_scan(path, index)
        colors = _sphere_colors(config, scan, cloud, grid.shape)
        thumbnail = virtual_sphere(colors, grid, spec)
        out = _stage(config, scan, "sphere", create=True)
        save_ply(thumbnail, out / "sphere.ply")
        save_ply(cloud.with_colors(colorize_points(index, colors)), out / "colorized.ply")
        return {"sphere_points": len(thumbnail), "colored_points": len(cloud)}

    return _for_each_scan(config, work)


def _ground_truth(config: dict[str, Any], scan: str, cloud: PointCloud, index: ProjectionIndex) -> np.ndarray:
    gt_dir = config["io"]["gt_dir"]
    if gt_dir:
        path = Path(gt_dir) / f"{scan}.png"
        if path.exists():
            return read_label_png(path, index.grid.shape)
    labels = _rasterized_labels(cloud, index)
    if labels is None:
        raise DataError(f"{scan}: missing ground truth (no gt mask and the scan carries no labels)")
    return labels


def _predicted_mask(config: dict[str, Any], scan: str, shape: tuple[int, int]) -> np.ndarray:
    reprojected = _stage(config, scan, "refine") / "labels_2d.png"
    if reprojected.exists():
        return read_label_png(reprojected, shape)
    return _fused_labels(config, scan, shape)


def cmd_eval(config: dict[str, Any]) -> Summary:
    exclude = config["evaluation"]["exclude"]
    bins = config["evaluation"]["bins"]

    def work(scan: str, path: Path) -> dict[str, Any]:
        index = _load_index(config, scan)
        cloud = _load_scan(path, index)
        names = [c.name for c in cloud.meta.class_names]
        gt = _ground_truth(config, scan, cloud, index)
        pred = _predicted_mask(config, scan, index.grid.shape)
        cm = confusion(gt, pred, len(names), exclude)
        report = metrics_to_dict(metrics(cm), names)

        out = _stage(config, scan, "eval", create=True)
        uncertainty_path = _stage(config, scan, "fuse") / "uncertainty.fcub"
        if uncertainty_path.exists():
            maps = load_cube(uncertainty_path)
            valid = index.counts() > 0
            report["map_entropy"] = {
                name: map_entropy(maps.channel(name), bins, valid) for name in _UNCERTAINTY_CHANNELS
            }
            errors = ((pred != gt) & valid).astype(np.int64)
            if errors[valid].any():
                curve = pr_curve(maps.channel("epistemic"), errors, valid)
                write_pr_csv(curve, out / "pr.csv")
                report["auprc"] = auprc(curve)
            else:
                _LOGGER.warning("%s: prediction has no errors; skipping the PR curve", scan)

        labeled = _stage(config, scan, "refine") / "labeled.ply"
        if cloud.labels is not None and labeled.exists():
            refined = load_ply(labeled)
            point_cm = confusion(cloud.labels, refined.labels, len(names), exclude)
            report["points"] = metrics_to_dict(metrics(point_cm), names)

        layout.write_json(out / "metrics.json", report)
        (out / "metrics.txt").write_text(render_metrics_table(scan, _flat(report)), encoding="utf-8")
        return {"report": report, "confusion": cm}

    results = _for_each_scan(config, work)
    reports = {scan: result["report"] for scan, result in results.items()}
    pooled = [result["confusion"] for result in results.values()]
    shapes = {cm.counts.shape for cm in pooled}
    if len(shapes) != 1:
        raise DataError(f"scans disagree on the class count: {sorted(shapes)}")
    total = sum(cm.counts for cm in pooled)
    names = _class_names_for(reports)
    aggregate = metrics_to_dict(metrics(ConfusionMatrix(total, tuple(exclude))), names)
    summary = {"scans": reports, "aggregate": aggregate}
    layout.write_json(_output(config) / "eval_summary.json", summary)
    table = render_summary_table({**{s: _flat(r) for s, r in reports.items()}, "aggregate": aggregate})
    (_output(config) / "eval_summary.txt").write_text(table, encoding="utf-8")
    return {
        scan: {
            "oAcc": _round(r["oAcc"]),
            "mIoU": _round(r["mIoU"]),
            "auprc": _round(r.get("auprc")),
        }
        for scan, r in reports.items()
    }


def _flat(report: dict[str, Any]) -> dict[str, Any]:
    flat = {k: v for k, v in report.items() if k != "points"}
    if isinstance(report.get("map_entropy"), dict):
        flat["map_entropy"] = report["map_entropy"].get("epistemic")
    return flat


def _class_names_for(reports: Summary) -> list[str]:
    for report in reports.values():
        return list(report["iou"])
    return []


def _round(value: float | None) -> float | None:
    return None if value is None else round(value, 4)


def cmd_synth(config: dict[str, Any]) -> Summary:
    paths = write_bundled_scans(Path(config["io"]["input_dir"]), grid_from_config(config), config["seed"])
    return {layout.scan_id(p): {"path": str(p)} for p in paths}


def cmd_run(config: dict[str, Any], baseline: bool = False, logits_dir: str | None = None) -> Summary:
    summary: Summary = {}
    stages: list[tuple[str, Callable[[], Summary]]] = [
        ("project", lambda: cmd_project(config)),
        ("featurize", lambda: cmd_featurize(config)),
        ("fuse", lambda: cmd_fuse(config, baseline, logits_dir)),
        ("refine", lambda: cmd_refine(config)),
        ("sphere", lambda: cmd_sphere(config)),
        ("eval", lambda: cmd_eval(config)),
    ]
    for stage, run in stages:
        _LOGGER.info("Stage %s", stage)
        for scan, stats in run().items():
            summary.setdefault(scan, {}).update({f"{stage}.{k}": v for k, v in stats.items()})
    return summary
