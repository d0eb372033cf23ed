"""PCA, MNF and ICA projections of feature cubes."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from sklearn.decomposition import FastICA
from sklearn.exceptions import ConvergenceWarning

from .errors import DataError
from .features import FeatureCube

_LOGGER = logging.getLogger(__name__)

KINDS = ("PCA", "MNF", "ICA")
RANK_TOL = 1e-10


@dataclass(frozen=True)
class ReductionModel:
    kind: str
    mean: np.ndarray
    components: np.ndarray
    input_names: tuple[str, ...] = ()
    whitening: np.ndarray | None = None
    diagnostics: dict[str, Any] = field(default_factory=dict)

    @property
    def n_components(self) -> int:
        return self.components.shape[1]

    @property
    def output_names(self) -> tuple[str, ...]:
        return tuple(f"{self.kind}{k + 1}" for k in range(self.n_components))


def _fit_pixels(cube: FeatureCube, k: int) -> np.ndarray:
    if k < 1:
        raise DataError(f"need at least one component, got k={k}")
    if cube.n_channels < k:
        raise DataError(f"cannot extract {k} components from {cube.n_channels} channels")
    x = cube.pixels()
    if len(x) < max(k, 2):
        raise DataError(f"need at least {max(k, 2)} valid pixels, cube has {len(x)}")
    return x


def _rank(eigenvalues: np.ndarray) -> int:
    top = float(np.max(np.abs(eigenvalues), initial=0.0))
    if top <= 0:
        return 0
    return int(np.sum(eigenvalues > RANK_TOL * top))


def _check_rank(eigenvalues: np.ndarray, k: int, kind: str) -> None:
    rank = _rank(eigenvalues)
    if rank < k:
        raise DataError(f"{kind} asked for {k} components but the data only reaches rank {rank}")


def _fix_signs(components: np.ndarray) -> np.ndarray:
    out = components.copy()
    pivot = np.argmax(np.abs(out), axis=0)
    signs = np.sign(out[pivot, np.arange(out.shape[1])])
    signs[signs == 0] = 1.0
    return out * signs


def _descending_eigh(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    values, vectors = np.linalg.eigh(matrix)
    order = np.argsort(values, kind="stable")[::-1]
    return values[order], vectors[:, order]


def pca_fit(cube: FeatureCube, k: int = 3) -> ReductionModel:
    x = _fit_pixels(cube, k)
    mean = x.mean(axis=0)
    values, vectors = _descending_eigh(np.atleast_2d(np.cov(x, rowvar=False)))
    _check_rank(values, k, "PCA")
    values = np.clip(values, 0.0, None)
    total = values.sum()
    diagnostics = {
        "explained_variance": values[:k].tolist(),
        "explained_variance_ratio": (values[:k] / total).tolist(),
    }
    return ReductionModel("PCA", mean, _fix_signs(vectors[:, :k]), cube.names, None, diagnostics)


def _noise_covariance(cube: FeatureCube) -> np.ndarray:
    # horizontal first differences between valid neighbors along azimuth
    pairs = cube.valid_mask[:, :-1] & cube.valid_mask[:, 1:]
    diffs = (cube.data[:, :, 1:] - cube.data[:, :, :-1])[:, pairs].T
    if len(diffs) < 2:
        raise DataError("MNF needs at least 2 horizontally adjacent valid pixel pairs")
    return np.atleast_2d(np.cov(diffs, rowvar=False)) / 2.0


def mnf_fit(cube: FeatureCube, k: int = 3, ridge: float = 1e-6) -> ReductionModel:
    x = _fit_pixels(cube, k)
    mean = x.mean(axis=0)
    sigma = np.atleast_2d(np.cov(x, rowvar=False))
    _check_rank(np.linalg.eigvalsh(sigma), k, "MNF")

    noise = _noise_covariance(cube)
    noise_values, noise_vectors = np.linalg.eigh(noise)
    floor = ridge * max(float(noise_values.max()), float(np.trace(sigma)) / len(sigma))
    regularized = int(np.sum(noise_values < floor))
    if regularized:
        _LOGGER.warning("MNF noise covariance ridge-regularized on %d directions", regularized)
    noise_values = np.maximum(noise_values, floor)
    whitening = noise_vectors @ np.diag(noise_values**-0.5) @ noise_vectors.T

    snr, rotation = _descending_eigh(whitening @ sigma @ whitening)
    components = _fix_signs(whitening @ rotation[:, :k])
    diagnostics = {"snr": snr[:k].tolist(), "ridge_floor": floor, "regularized": regularized}
    return ReductionModel("MNF", mean, components, cube.names, whitening, diagnostics)


def ica_fit(
    cube: FeatureCube,
    k: int = 3,
    seed: int = 42,
    max_iter: int = 500,
    tol: float = 1e-6,
) -> ReductionModel:
    x = _fit_pixels(cube, k)
    _check_rank(np.linalg.eigvalsh(np.atleast_2d(np.cov(x, rowvar=False))), k, "ICA")
    ica = FastICA(
        n_components=k,
        algorithm="parallel",
        whiten="unit-variance",
        fun="logcosh",
        max_iter=max_iter,
        tol=tol,
        random_state=seed,
    )
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        ica.fit(x)
    converged = not any(issubclass(w.category, ConvergenceWarning) for w in caught)
    if not converged:
        _LOGGER.warning("ICA did not converge in %d iterations; keeping the partial result", max_iter)
    diagnostics = {"converged": converged, "n_iter": int(ica.n_iter_), "seed": seed}
    components = _fix_signs(ica.components_.T)
    return ReductionModel("ICA", ica.mean_.copy(), components, cube.names, None, diagnostics)


def fit(kind: str, cube: FeatureCube, k: int = 3, seed: int = 42, **options: Any) -> ReductionModel:
    if kind == "PCA":
        return pca_fit(cube, k)
    if kind == "MNF":
        return mnf_fit(cube, k, ridge=options.get("ridge", 1e-6))
    if kind == "ICA":
        return ica_fit(
            cube, k, seed, max_iter=options.get("max_iter", 500), tol=options.get("tol", 1e-6)
        )
    raise DataError(f"unknown reduction kind '{kind}', expected one of {KINDS}")


def scores(model: ReductionModel, cube: FeatureCube) -> np.ndarray:
    """Raw projected scores as (k, H, W); void pixels are 0."""
    if cube.n_channels != len(model.mean):
        raise DataError(
            f"{model.kind} model expects {len(model.mean)} channels, cube has {cube.n_channels}"
        )
    height, width = cube.shape
    out = np.zeros((model.n_components, height, width))
    out[:, cube.valid_mask] = ((cube.pixels() - model.mean) @ model.components).T
    return out


def transform(model: ReductionModel, cube: FeatureCube) -> FeatureCube:
    raw = scores(model, cube)
    valid = cube.valid_mask
    out = np.zeros_like(raw)
    if valid.any():
        for c in range(len(raw)):
            values = raw[c][valid]
            lo, hi = values.min(), values.max()
            if hi - lo > 0:
                out[c][valid] = (values - lo) / (hi - lo)
    return FeatureCube(model.output_names, out, valid)


def concat_cubes(cubes: Sequence[FeatureCube]) -> FeatureCube:
    """Join cubes side by side with a void column between scans, for corpus-level fits."""
    if not cubes:
        raise DataError("no cubes to pool")
    names = cubes[0].names
    height = cubes[0].shape[0]
    data, valid = [], []
    for cube in cubes:
        if cube.names != names or cube.shape[0] != height:
            raise DataError("pooled cubes must share channel names and height")
        data.extend([cube.data, np.zeros((len(names), height, 1))])
        valid.extend([cube.valid_mask, np.zeros((height, 1), dtype=bool)])
    return FeatureCube(names, np.concatenate(data, axis=2), np.concatenate(valid, axis=1))


def save_model(model: ReductionModel, path: Path) -> None:
    payload = {
        "kind": model.kind,
        "input_names": list(model.input_names),
        "mean": model.mean.tolist(),
        "components": model.components.tolist(),
        "whitening": None if model.whitening is None else model.whitening.tolist(),
        "diagnostics": model.diagnostics,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2), encoding="utf-8")


def load_model(path: Path) -> ReductionModel:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
        kind = payload["kind"]
        whitening = payload.get("whitening")
        model = ReductionModel(
            kind,
            np.asarray(payload["mean"], dtype=np.float64),
            np.asarray(payload["components"], dtype=np.float64).reshape(len(payload["mean"]), -1),
            tuple(payload.get("input_names", ())),
            None if whitening is None else np.asarray(whitening, dtype=np.float64),
            dict(payload.get("diagnostics", {})),
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path.name}: invalid reduction model ({exc})") from exc
    if model.kind not in KINDS:
        raise DataError(f"{path.name}: unknown reduction kind '{model.kind}'")
    return model
