"""Equirectangular projection of scans and the way back to points."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError
from .pointcloud import PointCloud, ScanMeta

_TWO_PI = 2.0 * math.pi
_ANGLE_TOL = 1e-9

REDUCERS = ("nearest", "mean", "max")


def cell_count(span: float, step: float) -> int:
    return int(math.ceil(round(span / step, 9)))


@dataclass(frozen=True)
class GridSpec:
    theta_min: float
    theta_max: float
    phi_min: float
    phi_max: float
    d_theta: float
    d_phi: float

    def __post_init__(self) -> None:
        values = (self.theta_min, self.theta_max, self.phi_min, self.phi_max, self.d_theta, self.d_phi)
        if not all(math.isfinite(v) for v in values):
            raise DataError("grid angles must be finite")
        if self.d_theta <= 0 or self.d_phi <= 0:
            raise DataError("grid steps must be positive")
        if self.theta_max <= self.theta_min or self.phi_max <= self.phi_min:
            raise DataError("grid spans must be nonempty")
        if self.height < 1 or self.width < 1:
            raise DataError("grid step is larger than the span")

    @classmethod
    def from_degrees(
        cls,
        step: float,
        theta_span: Sequence[float] = (0.0, 135.0),
        phi_span: Sequence[float] = (0.0, 360.0),
        phi_step: float | None = None,
    ) -> GridSpec:
        return cls(
            math.radians(theta_span[0]),
            math.radians(theta_span[1]),
            math.radians(phi_span[0]),
            math.radians(phi_span[1]),
            math.radians(step),
            math.radians(phi_step if phi_step is not None else step),
        )

    @property
    def height(self) -> int:
        return int(round((self.theta_max - self.theta_min) / self.d_theta))

    @property
    def width(self) -> int:
        return int(round((self.phi_max - self.phi_min) / self.d_phi))

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        theta = self.theta_min + (np.arange(self.height) + 0.5) * self.d_theta
        phi = self.phi_min + (np.arange(self.width) + 0.5) * self.d_phi
        return theta, phi

    def as_dict(self) -> dict[str, float]:
        return {
            "theta_min": self.theta_min,
            "theta_max": self.theta_max,
            "phi_min": self.phi_min,
            "phi_max": self.phi_max,
            "d_theta": self.d_theta,
            "d_phi": self.d_phi,
        }


@dataclass(frozen=True)
class ProjectionIndex:
    """Point-to-pixel and pixel-to-points mapping.

    ``order[offsets[p]:offsets[p + 1]]`` lists the points of flat pixel ``p``
    sorted by ascending range, then point id.
    """

    grid: GridSpec
    pixel_i: np.ndarray
    pixel_j: np.ndarray
    ranges: np.ndarray
    order: np.ndarray
    offsets: np.ndarray

    @property
    def n_points(self) -> int:
        return len(self.pixel_i)

    @property
    def in_grid(self) -> np.ndarray:
        return self.pixel_i >= 0

    def pixel_points(self, i: int, j: int) -> np.ndarray:
        flat = i * self.grid.width + j
        return self.order[self.offsets[flat] : self.offsets[flat + 1]]

    def counts(self) -> np.ndarray:
        return np.diff(self.offsets).reshape(self.grid.shape)


@dataclass(frozen=True)
class DensityMap:
    counts: np.ndarray
    histogram: np.ndarray

    @property
    def mode(self) -> int:
        return int(np.argmax(self.histogram))


@dataclass(frozen=True)
class VirtualSphereSpec:
    resolution_deg: float = 1.0
    radius: float = 1.0
    theta_deg: tuple[float, float] = (0.0, 135.0)
    phi_deg: tuple[float, float] = (0.0, 360.0)

    def __post_init__(self) -> None:
        if not self.resolution_deg > 0:
            raise DataError(f"sphere resolution must be positive, got {self.resolution_deg}")
        if not self.radius > 0:
            raise DataError(f"sphere radius must be positive, got {self.radius}")
        if self.theta_deg[1] <= self.theta_deg[0] or self.phi_deg[1] <= self.phi_deg[0]:
            raise DataError("sphere spans must be nonempty")

    @property
    def rows(self) -> int:
        return cell_count(self.theta_deg[1] - self.theta_deg[0], self.resolution_deg)

    @property
    def cols(self) -> int:
        return cell_count(self.phi_deg[1] - self.phi_deg[0], self.resolution_deg)


def _angles(xyz: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    r = np.linalg.norm(xyz, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        theta = np.arccos(np.clip(xyz[:, 2] / r, -1.0, 1.0))
    phi = np.mod(np.arctan2(xyz[:, 1], xyz[:, 0]), _TWO_PI)
    phi[phi >= _TWO_PI] = 0.0
    return theta, phi, r


def compute_angles(point: Sequence[float]) -> tuple[float, float]:
    x, y, z = (float(v) for v in point[:3])
    if x == 0.0 and y == 0.0 and z == 0.0:
        raise DataError("cannot compute angles of a point at the scanner origin")
    theta, phi, _ = _angles(np.array([[x, y, z]]))
    return float(theta[0]), float(phi[0])


def project(cloud: PointCloud, grid: GridSpec) -> ProjectionIndex:
    xyz = cloud.xyz - cloud.origin
    theta, phi, r = _angles(xyz)
    height, width = grid.shape
    with np.errstate(invalid="ignore"):
        i = np.floor((theta - grid.theta_min) / grid.d_theta)
        j = np.floor((phi - grid.phi_min) / grid.d_phi)
        inside = (
            (r > 0)
            & (theta >= grid.theta_min)
            & (theta < grid.theta_max)
            & (phi >= grid.phi_min)
            & (phi < grid.phi_max)
            & (i >= 0)
            & (i < height)
            & (j >= 0)
            & (j < width)
        )
    pixel_i = np.where(inside, i, -1).astype(np.int64)
    pixel_j = np.where(inside, j, -1).astype(np.int64)

    ids = np.flatnonzero(inside)
    flat = pixel_i[ids] * width + pixel_j[ids]
    sort = np.lexsort((ids, r[ids], flat))
    order = ids[sort]
    counts = np.bincount(flat, minlength=height * width)
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return ProjectionIndex(grid, pixel_i, pixel_j, r, order, offsets)


def density_map(index: ProjectionIndex) -> DensityMap:
    counts = index.counts()
    return DensityMap(counts, np.bincount(counts.ravel(), minlength=1))


def rasterize_channel(
    index: ProjectionIndex, values: np.ndarray, reducer: str = "nearest"
) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] != index.n_points:
        raise DataError(f"got {values.shape[0]} values for {index.n_points} points")
    if reducer not in REDUCERS:
        raise DataError(f"unknown reducer '{reducer}', expected one of {REDUCERS}")
    height, width = index.grid.shape
    out = np.zeros((height * width,) + values.shape[1:], dtype=np.float64)
    counts = np.diff(index.offsets)
    occupied = counts > 0
    if not occupied.any():
        return out.reshape((height, width) + values.shape[1:])
    starts = index.offsets[:-1][occupied]
    ordered = values[index.order]
    if reducer == "nearest":
        out[occupied] = ordered[starts]
    elif reducer == "mean":
        sums = np.add.reduceat(ordered, starts, axis=0)
        out[occupied] = sums / counts[occupied].reshape((-1,) + (1,) * (values.ndim - 1))
    else:
        out[occupied] = np.maximum.reduceat(ordered, starts, axis=0)
    return out.reshape((height, width) + values.shape[1:])


def back_project(index: ProjectionIndex, mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.shape != index.grid.shape:
        raise DataError(f"mask shape {mask.shape} does not match grid {index.grid.shape}")
    labels = np.zeros(index.n_points, dtype=np.int64)
    inside = index.in_grid
    labels[inside] = mask[index.pixel_i[inside], index.pixel_j[inside]]
    return labels


def _as_rgb8(color_map: np.ndarray) -> np.ndarray:
    color_map = np.asarray(color_map)
    if color_map.ndim == 2:
        color_map = np.repeat(color_map[:, :, None], 3, axis=2)
    if color_map.ndim != 3 or color_map.shape[2] != 3:
        raise DataError(f"color map must be H x W x 3, got {color_map.shape}")
    if color_map.dtype == np.uint8:
        return color_map
    return np.round(np.clip(color_map, 0.0, 1.0) * 255.0).astype(np.uint8)


def colorize_points(index: ProjectionIndex, color_map: np.ndarray) -> np.ndarray:
    rgb = _as_rgb8(color_map)
    if rgb.shape[:2] != index.grid.shape:
        raise DataError(f"color map shape {rgb.shape[:2]} does not match grid {index.grid.shape}")
    colors = np.zeros((index.n_points, 3), dtype=np.uint8)
    inside = index.in_grid
    colors[inside] = rgb[index.pixel_i[inside], index.pixel_j[inside]]
    return colors


def virtual_sphere(color_map: np.ndarray, grid: GridSpec, spec: VirtualSphereSpec) -> PointCloud:
    rgb = _as_rgb8(color_map)
    if rgb.shape[:2] != grid.shape:
        raise DataError(f"color map shape {rgb.shape[:2]} does not match grid {grid.shape}")
    t0, t1 = (math.radians(v) for v in spec.theta_deg)
    p0, p1 = (math.radians(v) for v in spec.phi_deg)
    if (
        t0 < grid.theta_min - _ANGLE_TOL
        or t1 > grid.theta_max + _ANGLE_TOL
        or p0 < grid.phi_min - _ANGLE_TOL
        or p1 > grid.phi_max + _ANGLE_TOL
    ):
        raise DataError(
            f"sphere span zenith {spec.theta_deg} / azimuth {spec.phi_deg} exceeds the source grid"
        )

    step = math.radians(spec.resolution_deg)
    theta = t0 + (np.arange(spec.rows) + 0.5) * step
    phi = p0 + (np.arange(spec.cols) + 0.5) * step
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    tt = tt.ravel()
    pp = pp.ravel()

    height, width = grid.shape
    i = np.clip(np.floor((tt - grid.theta_min) / grid.d_theta), 0, height - 1).astype(np.int64)
    j = np.clip(np.floor((pp - grid.phi_min) / grid.d_phi), 0, width - 1).astype(np.int64)

    sin_t = np.sin(tt)
    xyz = spec.radius * np.column_stack([sin_t * np.cos(pp), sin_t * np.sin(pp), np.cos(tt)])
    meta = ScanMeta(source_id=f"virtual-sphere-{spec.resolution_deg:g}deg")
    return PointCloud(xyz, colors=rgb[i, j], meta=meta)


def save_index(index: ProjectionIndex, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    grid = index.grid.as_dict()
    np.savez(
        path,
        pixel_i=index.pixel_i,
        pixel_j=index.pixel_j,
        ranges=index.ranges,
        order=index.order,
        offsets=index.offsets,
        grid=np.array([grid[key] for key in sorted(grid)]),
    )


def load_index(path: Path) -> ProjectionIndex:
    with np.load(Path(path)) as data:
        keys = sorted(GridSpec(0.0, 1.0, 0.0, 1.0, 1.0, 1.0).as_dict())
        grid = GridSpec(**{key: float(v) for key, v in zip(keys, data["grid"])})
        index = ProjectionIndex(
            grid,
            data["pixel_i"],
            data["pixel_j"],
            data["ranges"],
            data["order"],
            data["offsets"],
        )
    if len(index.offsets) != grid.height * grid.width + 1:
        raise DataError(f"{Path(path).name}: offsets do not match the stored grid")
    return index
