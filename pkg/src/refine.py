"""Stage-3 label refinement on the point cloud."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .errors import DataError
from .features import eigen_descriptors
from .forest import RandomForest
from .pointcloud import PointCloud, SpatialIndex

_LOGGER = logging.getLogger(__name__)

_MIN_DIST = 1e-12


@dataclass(frozen=True)
class RefinementConfig:
    k_vote: int = 9
    tau: float = 0.8
    scales: tuple[float, ...] = (0.05, 0.15, 0.30)
    n_trees: int = 100
    max_depth: int | None = 20
    relabel_void: bool = False
    seed: int = 42
    max_neighbors: int = 32
    batch_points: int = 65536

    def __post_init__(self) -> None:
        if self.k_vote < 1:
            raise DataError(f"k_vote must be >= 1, got {self.k_vote}")
        if not 0 < self.tau <= 1:
            raise DataError(f"tau must lie in (0, 1], got {self.tau}")
        if not self.scales or any(s <= 0 for s in self.scales):
            raise DataError(f"feature scales must be a nonempty list of positive radii, got {self.scales}")


def knn_smooth(
    labels: np.ndarray, index: SpatialIndex, k_vote: int, batch_points: int = 65536
) -> np.ndarray:
    """Simultaneous majority vote over each point's k nearest neighbors.

    Void neighbors do not vote. Ties go to the larger summed inverse distance,
    then to the smaller class id. Void points and points without votes keep
    their label.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if index.size != n:
        raise DataError(f"spatial index has {index.size} points, got {n} labels")
    if k_vote < 1 or k_vote >= n:
        raise DataError(f"k_vote must lie in [1, {n - 1}] for {n} points, got {k_vote}")

    n_classes = int(labels.max(initial=0)) + 1
    smoothed = labels.copy()
    for start in range(0, n, batch_points):
        ids = np.arange(start, min(start + batch_points, n))
        dists, nbrs = index.query_batch(ids, k_vote)
        nbr_labels = labels[nbrs]
        rows = np.repeat(np.arange(len(ids)), nbrs.shape[1])
        flat = rows * n_classes + nbr_labels.ravel()
        size = len(ids) * n_classes
        counts = np.bincount(flat, minlength=size).reshape(len(ids), n_classes)
        weight = 1.0 / np.maximum(dists.ravel(), _MIN_DIST)
        weights = np.bincount(flat, weights=weight, minlength=size).reshape(len(ids), n_classes)
        counts[:, 0] = 0

        best = counts.max(axis=1)
        tied = (counts == best[:, None]) & (best[:, None] > 0)
        winner = np.argmax(np.where(tied, weights, -np.inf), axis=1)
        update = (best > 0) & (labels[ids] != 0)
        smoothed[ids[update]] = winner[update]
    return smoothed


def _check_pair(y: np.ndarray, y_hat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.int64)
    y_hat = np.asarray(y_hat, dtype=np.int64)
    if y.shape != y_hat.shape:
        raise DataError(f"label arrays differ in length: {y.shape} vs {y_hat.shape}")
    return y, y_hat


def core_set(y: np.ndarray, y_hat: np.ndarray) -> np.ndarray:
    y, y_hat = _check_pair(y, y_hat)
    return np.flatnonzero((y == y_hat) & (y != 0))


def suspect_set(y: np.ndarray, y_hat: np.ndarray, relabel_void: bool = False) -> np.ndarray:
    y, y_hat = _check_pair(y, y_hat)
    suspect = y != y_hat
    suspect = suspect | (y == 0) if relabel_void else suspect & (y != 0)
    return np.flatnonzero(suspect)


def point_features(
    cloud: PointCloud,
    index: SpatialIndex,
    scales: Sequence[float],
    max_neighbors: int = 32,
    batch_points: int = 65536,
    workers: int = 1,
) -> np.ndarray:
    """Height, range, intensity, normal and (curvature, anisotropy, planarity) per scale."""
    if not scales:
        raise DataError("point features need at least one scale")
    xyz = cloud.xyz
    height = xyz[:, 2] - xyz[:, 2].min()
    ranges = np.linalg.norm(xyz - cloud.origin, axis=1)
    intensity = cloud.intensity if cloud.intensity is not None else np.zeros(len(cloud))

    columns = [height[:, None], ranges[:, None], intensity[:, None]]
    geometry = []
    for k, scale in enumerate(scales):
        eigen = eigen_descriptors(cloud, index, float(scale), max_neighbors, batch_points, workers)
        if k == 0:
            columns.append(eigen.normals)
        geometry.append(np.column_stack([eigen.curvature, eigen.anisotropy, eigen.planarity]))
    return np.hstack(columns + geometry)


def rf_train(
    features: np.ndarray, labels: np.ndarray, config: RefinementConfig, workers: int = 1
) -> RandomForest:
    forest = RandomForest(config.n_trees, config.max_depth, seed=config.seed, workers=workers)
    return forest.fit(features, labels)


def rf_relabel(
    forest: RandomForest,
    suspect_ids: np.ndarray,
    features: np.ndarray,
    y_hat: np.ndarray,
    tau: float,
) -> np.ndarray:
    if not 0 < tau <= 1:
        raise DataError(f"tau must lie in (0, 1], got {tau}")
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != forest.n_features_:
        raise DataError(
            f"forest expects {forest.n_features_} features, got shape {features.shape}"
        )
    final = np.asarray(y_hat, dtype=np.int64).copy()
    suspect_ids = np.asarray(suspect_ids, dtype=np.int64)
    if suspect_ids.size == 0:
        return final
    proba = forest.predict_proba(features[suspect_ids])
    confident = proba.max(axis=1) >= tau
    final[suspect_ids[confident]] = forest.classes_[np.argmax(proba[confident], axis=1)]
    return final


def _changes_per_class(before: np.ndarray, after: np.ndarray, names: Sequence[str]) -> dict[str, int]:
    changed = before != after
    out = {}
    for class_id in np.unique(before[changed]):
        name = names[class_id] if class_id < len(names) else str(class_id)
        out[name] = int(np.sum(changed & (before == class_id)))
    return out


def refine_labels(
    cloud: PointCloud,
    index: SpatialIndex,
    config: RefinementConfig = RefinementConfig(),
    workers: int = 1,
) -> tuple[np.ndarray, dict[str, Any]]:
    """One pass of vote, core set, forest training and confident relabeling."""
    if cloud.labels is None:
        raise DataError("refinement needs back-projected labels on the cloud")
    y = cloud.labels
    y_hat = knn_smooth(y, index, config.k_vote, config.batch_points)
    core = core_set(y, y_hat)
    suspects = suspect_set(y, y_hat, config.relabel_void)

    report: dict[str, Any] = {
        "points": len(cloud),
        "vote_changes": int(np.sum(y != y_hat)),
        "core": int(len(core)),
        "suspects": int(len(suspects)),
        "forest_adoptions": 0,
        "forest_skipped": False,
    }
    final = y_hat
    core_classes = np.unique(y[core])
    if len(core_classes) < 2:
        _LOGGER.warning(
            "core set of %s has %d class(es); skipping forest relabeling",
            cloud.meta.source_id,
            len(core_classes),
        )
        report["forest_skipped"] = True
    elif len(suspects):
        features = point_features(
            cloud, index, config.scales, config.max_neighbors, config.batch_points, workers
        )
        forest = rf_train(features[core], y[core], config, workers)
        final = rf_relabel(forest, suspects, features, y_hat, config.tau)
        report["forest_adoptions"] = int(np.sum(final[suspects] != y_hat[suspects]))

    names = [c.name for c in cloud.meta.class_names]
    report["changes_per_class"] = _changes_per_class(y, final, names)
    report["final_counts"] = {
        (names[c] if c < len(names) else str(c)): int(n)
        for c, n in enumerate(np.bincount(final))
        if n
    }
    return final, report
