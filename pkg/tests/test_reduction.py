from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from src.errors import DataError
from src.features import FeatureCube
from src.reduction import (
    concat_cubes,
    fit,
    ica_fit,
    load_model,
    mnf_fit,
    pca_fit,
    save_model,
    scores,
    transform,
)


def _cube(channels: list[np.ndarray], valid: np.ndarray | None = None) -> FeatureCube:
    data = np.stack(channels)
    if valid is None:
        valid = np.ones(data.shape[1:], dtype=bool)
    return FeatureCube(tuple(f"c{k}" for k in range(len(channels))), data, valid)


def _gaussian_cube(stds: tuple[float, ...], seed: int = 0, shape: tuple[int, int] = (100, 100)) -> FeatureCube:
    rng = np.random.default_rng(seed)
    return _cube([rng.normal(0.0, s, size=shape) for s in stds])


def _two_sources(shape: tuple[int, int] = (60, 200)) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(2)
    cols = np.arange(shape[1])[None, :] + np.zeros(shape)
    square = np.sign(np.sin(2.0 * np.pi * cols / 37.0) + 1e-9)
    uniform = rng.uniform(-1.0, 1.0, size=shape)
    return square, uniform


def test_pca_orders_axes_by_variance() -> None:
    model = pca_fit(_gaussian_cube((1.0, 4.0, 2.0)), k=3)

    variance = model.diagnostics["explained_variance"]
    assert variance[0] > variance[1] > variance[2]
    assert variance[0] == pytest.approx(16.0, rel=0.1)
    np.testing.assert_allclose(np.abs(model.components), [[0, 0, 1], [1, 0, 0], [0, 1, 0]], atol=0.05)
    assert (model.components.max(axis=0) > 0.9).all()
    assert model.output_names == ("PCA1", "PCA2", "PCA3")


def test_pca_components_are_orthonormal() -> None:
    model = pca_fit(_gaussian_cube((3.0, 2.0, 1.0, 0.5), seed=4), k=3)

    np.testing.assert_allclose(model.components.T @ model.components, np.eye(3), atol=1e-10)
    assert sum(model.diagnostics["explained_variance_ratio"]) <= 1.0 + 1e-12


def test_pca_rejects_more_components_than_rank() -> None:
    rng = np.random.default_rng(1)
    a = rng.normal(size=(30, 30))
    b = rng.normal(size=(30, 30))

    with pytest.raises(DataError) as excinfo:
        pca_fit(_cube([a, b, a + b]), k=3)

    assert "only reaches rank 2" in str(excinfo.value)


def test_transform_scales_valid_pixels_to_unit_range() -> None:
    rng = np.random.default_rng(3)
    valid = np.ones((20, 20), dtype=bool)
    valid[:, :3] = False
    cube = _cube([rng.normal(size=(20, 20)) * valid for _ in range(4)], valid)
    model = pca_fit(cube, k=2)

    out = transform(model, cube)

    assert out.names == ("PCA1", "PCA2")
    for channel in out.data:
        assert channel[valid].min() == 0.0
        assert channel[valid].max() == 1.0
        assert not channel[~valid].any()
    assert np.array_equal(transform(model, cube).data, out.data)


def test_scores_reject_channel_count_mismatch() -> None:
    model = pca_fit(_gaussian_cube((2.0, 1.0)), k=1)

    with pytest.raises(DataError) as excinfo:
        scores(model, _gaussian_cube((2.0, 1.0, 1.0)))

    assert "expects 2 channels, cube has 3" in str(excinfo.value)


def test_mnf_ranks_spatially_smooth_channel_first() -> None:
    rng = np.random.default_rng(6)
    cols = np.arange(200)[None, :] + np.zeros((40, 200))
    smooth = np.sin(2.0 * np.pi * cols / 50.0) + rng.normal(0.0, 0.05, size=(40, 200))
    noise = rng.normal(0.0, 0.7, size=(40, 200))

    model = mnf_fit(_cube([smooth, noise]), k=2)

    assert np.argmax(np.abs(model.components[:, 0])) == 0
    snr = model.diagnostics["snr"]
    assert snr[0] > 10 * snr[1]


def test_mnf_is_invariant_to_channel_scaling() -> None:
    rng = np.random.default_rng(8)
    cols = np.arange(120)[None, :] + np.zeros((30, 120))
    a = np.cos(2.0 * np.pi * cols / 40.0) + rng.normal(0.0, 0.1, size=(30, 120))
    b = rng.normal(0.0, 1.0, size=(30, 120)) + 0.3 * a
    c = np.sin(2.0 * np.pi * cols / 25.0) + rng.normal(0.0, 0.3, size=(30, 120))
    plain = _cube([a, b, c])
    scaled = _cube([a * 10.0, b, c * 0.1])

    first = scores(mnf_fit(plain, k=3), plain)
    second = scores(mnf_fit(scaled, k=3), scaled)

    for k in range(3):
        r = np.corrcoef(first[k].ravel(), second[k].ravel())[0, 1]
        assert abs(r) == pytest.approx(1.0, abs=1e-6)


def test_ica_unmixes_independent_sources() -> None:
    square, uniform = _two_sources()
    mixed = [square + uniform, 0.5 * square + 2.0 * uniform]

    model = ica_fit(_cube(mixed), k=2, seed=0)
    recovered = scores(model, _cube(mixed))

    best = [
        max(abs(np.corrcoef(recovered[k].ravel(), source.ravel())[0, 1]) for k in range(2))
        for source in (square, uniform)
    ]
    assert min(best) > 0.95
    assert model.diagnostics["seed"] == 0


def test_ica_is_deterministic_under_seed() -> None:
    square, uniform = _two_sources()
    cube = _cube([square + uniform, 0.5 * square + 2.0 * uniform, uniform - square])

    first = ica_fit(cube, k=2, seed=13)
    second = ica_fit(cube, k=2, seed=13)

    assert np.array_equal(first.components, second.components)
    assert np.array_equal(first.mean, second.mean)


def test_fit_rejects_unknown_kind() -> None:
    with pytest.raises(DataError) as excinfo:
        fit("NMF", _gaussian_cube((1.0, 1.0)), k=1)

    assert "unknown reduction kind 'NMF'" in str(excinfo.value)


def test_concat_cubes_separates_scans_with_void_column() -> None:
    first = _gaussian_cube((1.0, 2.0), shape=(5, 4))
    second = _gaussian_cube((1.0, 2.0), seed=1, shape=(5, 6))

    pooled = concat_cubes([first, second])

    assert pooled.shape == (5, 12)
    assert not pooled.valid_mask[:, 4].any()
    assert int(pooled.valid_mask.sum()) == 50


def test_model_json_keeps_projection(tmp_path: Path) -> None:
    cube = _gaussian_cube((3.0, 1.0, 0.2), seed=9)
    model = mnf_fit(cube, k=2)
    path = tmp_path / "featurize" / "MNF.json"

    save_model(model, path)
    loaded = load_model(path)

    assert loaded.kind == "MNF"
    assert loaded.input_names == cube.names
    np.testing.assert_allclose(scores(loaded, cube), scores(model, cube))


def test_load_model_rejects_broken_json(tmp_path: Path) -> None:
    path = tmp_path / "PCA.json"
    path.write_text("{\"kind\": \"PCA\"}", encoding="utf-8")

    with pytest.raises(DataError) as excinfo:
        load_model(path)

    assert "invalid reduction model" in str(excinfo.value)
