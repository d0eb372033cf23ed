from __future__ import annotations

import numpy as np
import pytest

from src.errors import DataError
from src.forest import RandomForest
from src.pointcloud import PointCloud, SpatialIndex
from src.refine import (
    RefinementConfig,
    core_set,
    knn_smooth,
    point_features,
    refine_labels,
    rf_relabel,
    suspect_set,
)


def _line(labels: list[int]) -> tuple[np.ndarray, SpatialIndex]:
    xyz = np.column_stack([np.arange(len(labels), dtype=np.float64), np.zeros(len(labels)), np.zeros(len(labels))])
    return np.array(labels), SpatialIndex(xyz)


def _two_clusters(seed: int = 0) -> PointCloud:
    rng = np.random.default_rng(seed)
    a = rng.normal(0.0, 0.2, size=(40, 3)) + np.array([5.0, 0.0, 0.0])
    b = rng.normal(0.0, 0.2, size=(40, 3)) + np.array([5.0, 5.0, 2.0])
    labels = np.array([1] * 40 + [2] * 40)
    labels[3] = 2
    intensity = np.concatenate([rng.uniform(100, 200, 40), rng.uniform(600, 700, 40)])
    return PointCloud(np.vstack([a, b]), intensity=intensity, labels=labels)


def test_knn_smooth_removes_isolated_label() -> None:
    labels, index = _line([1, 1, 2, 1, 1])

    assert knn_smooth(labels, index, k_vote=2).tolist() == [1, 1, 1, 1, 1]


def test_knn_smooth_breaks_count_ties_by_distance_then_class_id() -> None:
    labels, index = _line([3, 1, 2])

    # point 0: one vote each from classes 1 and 2, class 1 is closer
    # point 1: equal votes at equal distance, smaller id wins
    assert knn_smooth(labels, index, k_vote=2).tolist() == [1, 2, 1]


def test_knn_smooth_void_keeps_label_and_does_not_vote() -> None:
    labels, index = _line([0, 0, 2, 0, 0])

    smoothed = knn_smooth(labels, index, k_vote=2)

    assert smoothed.tolist() == [0, 0, 2, 0, 0]


def test_knn_smooth_matches_brute_force_vote() -> None:
    rng = np.random.default_rng(7)
    xyz = rng.uniform(0.0, 1.0, size=(150, 3))
    labels = rng.integers(0, 4, size=150)
    k = 6

    smoothed = knn_smooth(labels, SpatialIndex(xyz), k_vote=k, batch_points=40)

    for pid in range(len(xyz)):
        dist = np.linalg.norm(xyz - xyz[pid], axis=1)
        dist[pid] = np.inf
        nbrs = np.argsort(dist, kind="stable")[:k]
        votes = {c: (0, 0.0) for c in range(1, 4)}
        for q in nbrs:
            if labels[q]:
                count, weight = votes[labels[q]]
                votes[labels[q]] = (count + 1, weight + 1.0 / dist[q])
        best = max(votes.items(), key=lambda item: (item[1][0], item[1][1], -item[0]))
        if labels[pid] == 0 or best[1][0] == 0:
            assert smoothed[pid] == labels[pid]
        else:
            assert smoothed[pid] == best[0]


def test_knn_smooth_needs_more_points_than_k() -> None:
    labels, index = _line([1, 2, 1])

    with pytest.raises(DataError) as excinfo:
        knn_smooth(labels, index, k_vote=3)

    assert "k_vote must lie in [1, 2]" in str(excinfo.value)


def test_core_and_suspect_sets() -> None:
    y = np.array([1, 2, 0, 3])
    y_hat = np.array([1, 1, 0, 3])

    assert core_set(y, y_hat).tolist() == [0, 3]
    assert suspect_set(y, y_hat).tolist() == [1]
    assert suspect_set(y, y_hat, relabel_void=True).tolist() == [1, 2]


def test_point_features_have_three_columns_per_scale() -> None:
    cloud = _two_clusters()
    index = SpatialIndex.from_cloud(cloud)

    features = point_features(cloud, index, scales=(0.3, 0.6))

    assert features.shape == (80, 3 + 3 + 3 * 2)
    assert features[:, 0].min() == 0.0
    np.testing.assert_allclose(features[:, 1], np.linalg.norm(cloud.xyz, axis=1))
    np.testing.assert_allclose(np.linalg.norm(features[:, 3:6], axis=1), 1.0)


def test_rf_relabel_adopts_only_confident_predictions() -> None:
    # identical features force every tree to a 50/50 leaf
    x = np.zeros((20, 2))
    y = np.array([1] * 10 + [2] * 10)
    forest = RandomForest(n_trees=5, seed=3).fit(x, y)
    y_hat = np.array([2, 2, 2])
    features = np.zeros((3, 2))

    assert rf_relabel(forest, np.array([0, 2]), features, y_hat, tau=0.8).tolist() == [2, 2, 2]
    assert rf_relabel(forest, np.array([0, 2]), features, y_hat, tau=0.5).tolist() == [1, 2, 1]


def test_refine_labels_fixes_stray_label_and_reports() -> None:
    cloud = _two_clusters()
    config = RefinementConfig(k_vote=5, scales=(0.5,), n_trees=10, max_depth=6, seed=1)

    final, report = refine_labels(cloud, SpatialIndex.from_cloud(cloud), config)

    assert final[3] == 1
    assert report["points"] == 80
    assert report["vote_changes"] >= 1
    assert report["forest_skipped"] is False
    assert report["changes_per_class"]["Stem"] >= 1
    assert sum(report["final_counts"].values()) == 80


def test_refine_labels_skips_forest_for_single_class_core() -> None:
    rng = np.random.default_rng(2)
    cloud = PointCloud(rng.normal(size=(30, 3)) + 5.0, labels=np.ones(30, dtype=np.int64))

    final, report = refine_labels(cloud, SpatialIndex.from_cloud(cloud), RefinementConfig(k_vote=4))

    assert report["forest_skipped"] is True
    assert final.tolist() == [1] * 30


def test_refinement_config_validates_tau() -> None:
    with pytest.raises(DataError) as excinfo:
        RefinementConfig(tau=0.0)

    assert "tau must lie in (0, 1]" in str(excinfo.value)


def _noisy_boundary_scan(noise_frac: float = 0.05) -> tuple[PointCloud, np.ndarray]:
    rng = np.random.default_rng(12)
    gx, gy = np.meshgrid(np.arange(40) * 0.05, np.arange(20) * 0.05)
    xy = np.column_stack([gx.ravel(), gy.ravel()]) + rng.normal(0.0, 0.004, size=(800, 2))
    xyz = np.column_stack([xy, np.full(800, -1.0)])
    truth = np.where(xyz[:, 0] < 1.0, 1, 2)
    intensity = np.where(truth == 1, rng.uniform(100, 200, 800), rng.uniform(600, 700, 800))

    band = np.flatnonzero(np.abs(xyz[:, 0] - 1.0) < 0.2)
    flipped = rng.choice(band, size=int(noise_frac * len(xyz)), replace=False)
    noisy = truth.copy()
    noisy[flipped] = 3 - truth[flipped]
    return PointCloud(xyz, intensity=intensity, labels=noisy), truth


def test_refine_labels_reduces_boundary_noise_and_keeps_core_labels() -> None:
    cloud, truth = _noisy_boundary_scan()
    index = SpatialIndex.from_cloud(cloud)
    config = RefinementConfig(k_vote=9, scales=(0.15,), n_trees=20, max_depth=8, seed=4)

    final, _ = refine_labels(cloud, index, config)

    errors_before = int(np.sum(cloud.labels != truth))
    assert errors_before == 40
    assert int(np.sum(final != truth)) < errors_before
    core = core_set(cloud.labels, knn_smooth(cloud.labels, index, k_vote=9))
    assert np.array_equal(final[core], cloud.labels[core])


def test_refine_labels_is_reproducible_for_a_seed() -> None:
    cloud, _ = _noisy_boundary_scan()
    config = RefinementConfig(k_vote=9, scales=(0.15,), n_trees=20, max_depth=8, seed=4)

    first, first_report = refine_labels(cloud, SpatialIndex.from_cloud(cloud), config, workers=2)
    second, second_report = refine_labels(cloud, SpatialIndex.from_cloud(cloud), config, workers=2)

    assert np.array_equal(first, second)
    assert first_report == second_report
