"""Synthetic scans: a beam-aligned sphere and small ray-cast forest plots."""

from __future__ import annotations

import logging
import math
from pathlib import Path

import numpy as np

from .errors import DataError
from .pointcloud import DEFAULT_SEED, PointCloud, ScanMeta, save_ply
from .projection import GridSpec

_LOGGER = logging.getLogger(__name__)

GROUND_Z = -1.5
CANOPY_Z = 4.0
MAX_RANGE = 40.0
STEM_RADIUS = 0.3
RANGE_NOISE = 0.005

# class id -> mean intensity in [0, 1]; the classes do not overlap in intensity
INTENSITY_LEVELS = {1: 0.25, 2: 0.55, 3: 0.85}
INTENSITY_NOISE = 0.03
INTENSITY_SCALE = 1000.0

BUNDLED_SCANS = 3


def _directions(theta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    sin_t = np.sin(theta)
    return np.column_stack([sin_t * np.cos(phi), sin_t * np.sin(phi), np.cos(theta)])


def beam_aligned_scan(grid: GridSpec, radius: float = 10.0) -> PointCloud:
    """One point at every pixel center, all at the same range."""
    if radius <= 0:
        raise DataError(f"radius must be positive, got {radius}")
    theta, phi = grid.pixel_centers()
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    xyz = radius * _directions(tt.ravel(), pp.ravel())
    intensity = np.full(len(xyz), 0.5 * INTENSITY_SCALE)
    return PointCloud(xyz, intensity=intensity, meta=ScanMeta(source_id="beam-aligned"))


def _stem_hits(directions: np.ndarray, stems: np.ndarray) -> np.ndarray:
    t_best = np.full(len(directions), np.inf)
    dx, dy, dz = directions.T
    a = dx**2 + dy**2
    for cx, cy in stems:
        b = -2.0 * (dx * cx + dy * cy)
        c = cx**2 + cy**2 - STEM_RADIUS**2
        disc = b**2 - 4.0 * a * c
        hit = (disc >= 0) & (a > 0)
        t = np.full(len(directions), np.inf)
        t[hit] = (-b[hit] - np.sqrt(disc[hit])) / (2.0 * a[hit])
        z = t * dz
        ok = hit & (t > 0) & (z >= GROUND_Z) & (z <= CANOPY_Z)
        t_best = np.where(ok & (t < t_best), t, t_best)
    return t_best


def forest_plot_scan(
    grid: GridSpec, seed: int = DEFAULT_SEED, n_stems: int = 12, scan_id: str = "synthetic"
) -> PointCloud:
    """Ray-cast a flat plot with vertical stems under a flat canopy.

    Ground is class 1, stems class 2, canopy class 3. One return per pixel at
    most, jittered inside the pixel; rays that hit nothing within range are dropped.
    """
    rng = np.random.default_rng(seed)
    angle = rng.uniform(0.0, 2.0 * math.pi, n_stems)
    dist = rng.uniform(2.5, 9.0, n_stems)
    stems = np.column_stack([dist * np.cos(angle), dist * np.sin(angle)])

    theta, phi = grid.pixel_centers()
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    tt = tt.ravel() + rng.uniform(-0.4, 0.4, tt.size) * grid.d_theta
    pp = pp.ravel() + rng.uniform(-0.4, 0.4, pp.size) * grid.d_phi
    directions = _directions(tt, pp)
    dz = directions[:, 2]

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = np.where(dz < 0, GROUND_Z / dz, np.inf)
        t_canopy = np.where(dz > 0, CANOPY_Z / dz, np.inf)
    t_stem = _stem_hits(directions, stems)
    candidates = np.stack([t_ground, t_stem, t_canopy])
    t = candidates.min(axis=0)
    labels = np.argmin(candidates, axis=0) + 1
    hit = t <= MAX_RANGE

    t = t[hit] + rng.normal(0.0, RANGE_NOISE, int(hit.sum()))
    labels = labels[hit]
    xyz = directions[hit] * t[:, None]
    levels = np.array([0.0] + [INTENSITY_LEVELS[c] for c in (1, 2, 3)])
    intensity = np.clip(levels[labels] + rng.normal(0.0, INTENSITY_NOISE, len(labels)), 0.0, 1.0)
    _LOGGER.debug("scan %s: %d returns from %d rays", scan_id, len(labels), hit.size)
    return PointCloud(
        xyz,
        intensity=intensity * INTENSITY_SCALE,
        labels=labels.astype(np.int64),
        meta=ScanMeta(source_id=scan_id),
    )


def write_bundled_scans(
    directory: Path, grid: GridSpec, seed: int = DEFAULT_SEED, count: int = BUNDLED_SCANS
) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for k in range(count):
        scan_id = f"plot_{k + 1:02d}"
        cloud = forest_plot_scan(grid, seed + k, scan_id=scan_id)
        path = directory / f"{scan_id}.ply"
        save_ply(cloud, path)
        paths.append(path)
    return paths
