"""Feature cubes over the spherical grid."""

from __future__ import annotations

import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from matplotlib.colors import hsv_to_rgb

from .errors import ConfigError, DataError
from .pointcloud import AdaptiveRadiusSpec, PointCloud, SpatialIndex, adaptive_radii
from .projection import ProjectionIndex, rasterize_channel

_LOGGER = logging.getLogger(__name__)

FLOOR = 0.01
TILE_ALIGN = 32
NORMAL_SATURATION = 0.6
BATCH_TILE_DEG = 10.0
MIN_NEIGHBORS = 3

_FCUB_MAGIC = b"FCUB"
_FCUB_VERSION = 1
_FCUB_HEADER = struct.Struct("<4sHIII")
_NAME_LEN = struct.Struct("<H")

BASE_PARTS = ("IRZ_RAW", "IRZ", "CAP", "N3")
STAT_PARTS = ("PCA", "MNF", "ICA")

FEATURE_SETS: dict[str, tuple[str, ...]] = {
    "IRZ_RAW": ("IRZ_RAW",),
    "IRZ": ("IRZ",),
    "CAP": ("CAP",),
    "N3": ("N3",),
    "PCA": ("PCA",),
    "MNF": ("MNF",),
    "ICA": ("ICA",),
    "IRZ_CAP": ("IRZ", "CAP"),
    "IRZ_N3": ("IRZ", "N3"),
    "IRZ_PCA": ("IRZ", "PCA"),
    "IRZ_MNF": ("IRZ", "MNF"),
    "IRZ_ICA": ("IRZ", "ICA"),
    "CAP_N3": ("CAP", "N3"),
    "IRZ_N3_CAP": ("IRZ", "N3", "CAP"),
    "IRZ_N3_CAP_PCA": ("IRZ", "N3", "CAP", "PCA"),
}
_ALIASES = {"I.R.Z": "IRZ", "C.A.P": "CAP", "I.R.Z_RAW": "IRZ_RAW"}

# statistical trios are fit on this stack
REDUCTION_INPUT = "IRZ_N3_CAP"


@dataclass(frozen=True)
class FeatureCube:
    """Named channels of shape (C, H, W) plus the mask of non-void pixels."""

    names: tuple[str, ...]
    data: np.ndarray
    valid_mask: np.ndarray

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3:
            raise DataError(f"cube data must be C x H x W, got shape {data.shape}")
        names = tuple(self.names)
        if len(names) != data.shape[0]:
            raise DataError(f"{len(names)} channel names for {data.shape[0]} channels")
        if len(set(names)) != len(names):
            raise DataError(f"duplicate channel names in {names}")
        valid = np.asarray(self.valid_mask, dtype=bool)
        if valid.shape != data.shape[1:]:
            raise DataError(f"valid mask shape {valid.shape} does not match {data.shape[1:]}")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "valid_mask", valid)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    def channel(self, name: str) -> np.ndarray:
        try:
            return self.data[self.names.index(name)]
        except ValueError:
            raise DataError(f"cube has no channel '{name}'") from None

    def pixels(self) -> np.ndarray:
        """Valid pixels as rows of a (n_valid, C) matrix."""
        return self.data[:, self.valid_mask].T

    def rename(self, names: Sequence[str]) -> FeatureCube:
        return FeatureCube(tuple(names), self.data, self.valid_mask)

    def select(self, names: Sequence[str], valid_mask: np.ndarray | None = None) -> FeatureCube:
        data = np.stack([self.channel(name) for name in names])
        return FeatureCube(tuple(names), data, self.valid_mask if valid_mask is None else valid_mask)


@dataclass(frozen=True)
class EigenFeatures:
    eigenvalues: np.ndarray
    curvature: np.ndarray
    anisotropy: np.ndarray
    planarity: np.ndarray
    normals: np.ndarray
    degenerate: np.ndarray

    def __len__(self) -> int:
        return len(self.curvature)


@dataclass(frozen=True)
class Tile:
    image: np.ndarray
    core: tuple[int, int, int, int]
    padded: tuple[int, int]
    columns: np.ndarray
    buffer: int

    @property
    def core_mask(self) -> np.ndarray:
        """Boolean mask of the unbuffered core inside the padded tile."""
        mask = np.zeros(self.padded, dtype=bool)
        r0, r1, c0, c1 = self.core
        mask[: r1 - r0, self.buffer : self.buffer + c1 - c0] = True
        return mask


@dataclass(frozen=True)
class TileSet:
    tiles: tuple[Tile, ...]
    shape: tuple[int, int]

    def __len__(self) -> int:
        return len(self.tiles)


def _stretch(values: np.ndarray, valid: np.ndarray, percentiles: Sequence[float]) -> np.ndarray:
    out = np.zeros_like(values, dtype=np.float64)
    inside = values[valid]
    lo, hi = np.percentile(inside, [percentiles[0], percentiles[1]])
    if hi - lo <= 0:
        out[valid] = FLOOR
        return out
    clipped = np.clip(inside, lo, hi)
    out[valid] = FLOOR + (1.0 - FLOOR) * (clipped - lo) / (hi - lo)
    return out


def _check_percentiles(percentiles: Sequence[float]) -> None:
    lo, hi = percentiles
    if not 0 <= lo < hi <= 100:
        raise DataError(f"stretch percentiles must satisfy 0 <= lo < hi <= 100, got {percentiles}")


def preprocess_basic(
    intensity_map: np.ndarray,
    range_map: np.ndarray,
    z_map: np.ndarray,
    valid: np.ndarray,
    percentiles: Sequence[float] = (1.0, 99.0),
) -> FeatureCube:
    maps = [np.asarray(m, dtype=np.float64) for m in (intensity_map, range_map, z_map)]
    valid = np.asarray(valid, dtype=bool)
    if any(m.shape != valid.shape for m in maps):
        raise DataError("intensity, range and z maps must share the valid mask shape")
    if not valid.any():
        raise DataError("cannot preprocess an all-void map")
    _check_percentiles(percentiles)

    intensity = _stretch(maps[0], valid, percentiles)
    ranges = _stretch(maps[1], valid, percentiles)

    z_inv = np.zeros_like(maps[2])
    height = maps[2][valid] - maps[2][valid].min()
    top = height.max()
    z_inv[valid] = 1.0 if top <= 0 else 1.0 - (1.0 - FLOOR) * height / top
    return FeatureCube(("I", "R", "Z"), np.stack([intensity, ranges, z_inv]), valid)


def _batch_order(xyz: np.ndarray, origin: np.ndarray) -> np.ndarray:
    rel = xyz - origin
    r = np.linalg.norm(rel, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        theta = np.nan_to_num(np.arccos(np.clip(rel[:, 2] / r, -1.0, 1.0)))
    phi = np.mod(np.arctan2(rel[:, 1], rel[:, 0]), 2.0 * math.pi)
    step = math.radians(BATCH_TILE_DEG)
    row = np.floor(theta / step).astype(np.int64)
    col = np.floor(phi / step).astype(np.int64)
    return np.lexsort((np.arange(len(xyz)), col, row))


def _view_vectors(xyz: np.ndarray, origin: np.ndarray) -> np.ndarray:
    view = origin - xyz
    norm = np.linalg.norm(view, axis=1, keepdims=True)
    out = np.tile([0.0, 0.0, 1.0], (len(xyz), 1))
    ok = norm[:, 0] > 0
    out[ok] = view[ok] / norm[ok]
    return out


def _point_radii(index: SpatialIndex, ids: np.ndarray, spec: AdaptiveRadiusSpec) -> np.ndarray:
    if index.size > spec.k_ref:
        return adaptive_radii(index, ids, spec)
    # small cloud: the farthest available neighbor stands in for d_(k)
    dists, _ = index.query_batch(ids, spec.k_ref)
    if dists.shape[1] == 0:
        return np.full(len(ids), spec.r_min)
    return np.clip(spec.lam * dists[:, -1], spec.r_min, spec.r_max)


def _eigen_batch(
    xyz: np.ndarray,
    origin: np.ndarray,
    ids: np.ndarray,
    nbr_dists: np.ndarray,
    nbr_ids: np.ndarray,
    radii: np.ndarray,
) -> tuple[np.ndarray, ...]:
    # the query point itself is part of its neighborhood
    members = np.concatenate([ids[:, None], nbr_ids], axis=1)
    inside = np.concatenate(
        [np.ones((len(ids), 1), dtype=bool), nbr_dists <= radii[:, None]], axis=1
    )
    pts = xyz[members]
    weight = inside[:, :, None].astype(np.float64)
    count = inside.sum(axis=1)
    n_neighbors = count - 1
    mean = (pts * weight).sum(axis=1) / count[:, None]
    centered = (pts - mean[:, None, :]) * weight
    denom = np.maximum(count - 1, 1)[:, None, None]
    cov = np.einsum("nki,nkj->nij", centered, centered) / denom

    values, vectors = np.linalg.eigh(cov)
    values = np.clip(values, 0.0, None)
    l1, l2, l3 = values[:, 0], values[:, 1], values[:, 2]
    degenerate = (n_neighbors < MIN_NEIGHBORS) | (l3 <= 0)
    ok = ~degenerate

    curvature = np.zeros(len(ids))
    anisotropy = np.zeros(len(ids))
    planarity = np.zeros(len(ids))
    total = l1 + l2 + l3
    curvature[ok] = l1[ok] / total[ok]
    anisotropy[ok] = (l3[ok] - l2[ok]) / l3[ok]
    planarity[ok] = (l2[ok] - l1[ok]) / l3[ok]

    normals = vectors[:, :, 0].copy()
    view = _view_vectors(xyz[ids], origin)
    flip = np.einsum("ij,ij->i", normals, view) < 0
    normals[flip] *= -1.0
    normals[degenerate] = view[degenerate]
    values[degenerate] = 0.0
    return values, curvature, anisotropy, planarity, normals, degenerate


def eigen_descriptors(
    cloud: PointCloud,
    index: SpatialIndex,
    radius: AdaptiveRadiusSpec | float = AdaptiveRadiusSpec(),
    max_neighbors: int = 32,
    batch_points: int = 65536,
    workers: int = 1,
) -> EigenFeatures:
    """Covariance eigen descriptors for every point.

    Each point's neighborhood is itself plus up to ``max_neighbors`` nearest
    neighbors inside its radius. Points are processed in batches ordered by
    azimuth-elevation tile.
    """
    n = len(cloud)
    if index.size != n:
        raise DataError(f"spatial index has {index.size} points, cloud has {n}")
    if max_neighbors < 2 or batch_points < 1:
        raise DataError("max_neighbors must be >= 2 and batch_points >= 1")

    xyz = cloud.xyz
    origin = cloud.origin
    order = _batch_order(xyz, origin)
    batches = [order[s : s + batch_points] for s in range(0, n, batch_points)]

    values = np.zeros((n, 3))
    curvature = np.zeros(n)
    anisotropy = np.zeros(n)
    planarity = np.zeros(n)
    normals = np.zeros((n, 3))
    degenerate = np.zeros(n, dtype=bool)

    def run(ids: np.ndarray) -> None:
        if isinstance(radius, AdaptiveRadiusSpec):
            radii = _point_radii(index, ids, radius)
        else:
            radii = np.full(len(ids), float(radius))
        dists, nbrs = index.query_batch(ids, max_neighbors)
        out = _eigen_batch(xyz, origin, ids, dists, nbrs, radii)
        values[ids], curvature[ids], anisotropy[ids], planarity[ids], normals[ids], degenerate[ids] = out

    if not isinstance(radius, AdaptiveRadiusSpec) and not float(radius) > 0:
        raise DataError(f"neighborhood radius must be positive, got {radius}")
    if isinstance(radius, AdaptiveRadiusSpec) and n <= radius.k_ref:
        _LOGGER.warning(
            "Cloud has %d points, not more than k_ref=%d; radii use the farthest available neighbor",
            n,
            radius.k_ref,
        )
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        list(pool.map(run, batches))

    n_degenerate = int(degenerate.sum())
    if n_degenerate:
        _LOGGER.warning("%d of %d points have degenerate neighborhoods", n_degenerate, n)
    return EigenFeatures(values, curvature, anisotropy, planarity, normals, degenerate)


def normals_to_pseudo_rgb(normals: np.ndarray, valid: np.ndarray) -> FeatureCube:
    normals = np.asarray(normals, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if normals.shape != valid.shape + (3,):
        raise DataError(f"normal map shape {normals.shape} does not match mask {valid.shape}")
    vecs = normals[valid]
    length = np.linalg.norm(vecs, axis=1)
    if np.any(length <= 0):
        raise DataError("zero-length normal on a valid pixel")
    vecs = vecs / length[:, None]

    hue = np.mod(np.arctan2(vecs[:, 1], vecs[:, 0]), 2.0 * math.pi) / (2.0 * math.pi)
    elevation = np.arcsin(np.clip(vecs[:, 2], -1.0, 1.0))
    value = np.clip((elevation + math.pi / 2.0) / math.pi, 0.0, 1.0)
    hsv = np.column_stack([np.clip(hue, 0.0, 1.0), np.full(len(vecs), NORMAL_SATURATION), value])

    rgb = np.zeros(valid.shape + (3,))
    rgb[valid] = hsv_to_rgb(hsv)
    return FeatureCube(("N_r", "N_g", "N_b"), np.moveaxis(rgb, -1, 0), valid)


def stack(*parts: FeatureCube) -> FeatureCube:
    if not parts:
        raise DataError("nothing to stack")
    shape = parts[0].shape
    names: list[str] = []
    for part in parts:
        if part.shape != shape:
            raise DataError(f"cannot stack {part.shape} cube onto {shape}")
        clash = set(names) & set(part.names)
        if clash:
            raise DataError(f"channel name collision: {sorted(clash)}")
        names.extend(part.names)
    valid = np.logical_and.reduce([part.valid_mask for part in parts])
    return FeatureCube(tuple(names), np.concatenate([part.data for part in parts]), valid)


def resolve_feature_set(name: str) -> str:
    key = _ALIASES.get(name, name)
    if key not in FEATURE_SETS:
        raise ConfigError(
            f"unknown feature set '{name}', expected one of {sorted(FEATURE_SETS)}"
        )
    return key


def build_feature_set(name: str, parts: Mapping[str, FeatureCube]) -> FeatureCube:
    key = resolve_feature_set(name)
    missing = [part for part in FEATURE_SETS[key] if part not in parts]
    if missing:
        raise DataError(f"feature set {key} needs parts {missing} which were not computed")
    return stack(*(parts[part] for part in FEATURE_SETS[key]))


def base_parts(
    cloud: PointCloud,
    index: ProjectionIndex,
    eigen: EigenFeatures,
    percentiles: Sequence[float] = (1.0, 99.0),
) -> dict[str, FeatureCube]:
    """Rasterize the per-point inputs and build the IRZ_RAW, IRZ, CAP and N3 parts."""
    if len(eigen) != len(cloud):
        raise DataError(f"{len(eigen)} descriptors for {len(cloud)} points")
    valid = index.counts() > 0
    if cloud.intensity is None:
        _LOGGER.warning("scan %s has no intensity; using a zero channel", cloud.meta.source_id)
        intensity = np.zeros(len(cloud))
    else:
        intensity = cloud.intensity
    z = cloud.xyz[:, 2] - cloud.origin[2]

    raw = np.stack(
        [
            rasterize_channel(index, intensity),
            rasterize_channel(index, index.ranges),
            rasterize_channel(index, z),
        ]
    )
    cap = np.stack(
        [
            rasterize_channel(index, eigen.curvature),
            rasterize_channel(index, eigen.anisotropy),
            rasterize_channel(index, eigen.planarity),
        ]
    )
    normal_map = rasterize_channel(index, eigen.normals)
    return {
        "IRZ_RAW": FeatureCube(("I_raw", "R_raw", "Z_raw"), raw, valid),
        "IRZ": preprocess_basic(raw[0], raw[1], raw[2], valid, percentiles),
        "CAP": FeatureCube(("C", "A", "P"), cap, valid),
        "N3": normals_to_pseudo_rgb(normal_map, valid),
    }


def correlation_matrix(cube: FeatureCube, scope: str = "valid_only") -> np.ndarray:
    """Pearson correlation between channels; zero-variance channels give NaN rows."""
    if scope not in ("valid_only", "all"):
        raise DataError(f"unknown correlation scope '{scope}'")
    if cube.n_channels < 2:
        raise DataError("correlation needs at least 2 channels")
    x = cube.pixels() if scope == "valid_only" else cube.data.reshape(cube.n_channels, -1).T
    if len(x) < 2:
        raise DataError("correlation needs at least 2 pixels in scope")

    centered = x - x.mean(axis=0)
    sd = np.sqrt((centered**2).sum(axis=0))
    flat = sd <= 0
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = (centered.T @ centered) / np.outer(sd, sd)
    corr = np.clip(corr, -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    corr[flat, :] = np.nan
    corr[:, flat] = np.nan
    return corr


def _core_bounds(width: int, n_tiles: int) -> list[tuple[int, int]]:
    step = math.ceil(width / n_tiles)
    bounds = [(k * step, min((k + 1) * step, width)) for k in range(n_tiles)]
    if any(c1 <= c0 for c0, c1 in bounds):
        edges = np.linspace(0, width, n_tiles + 1).round().astype(int)
        bounds = [(int(edges[k]), int(edges[k + 1])) for k in range(n_tiles)]
    return bounds


def _align(n: int) -> int:
    return int(math.ceil(n / TILE_ALIGN) * TILE_ALIGN)


def tile(cube: FeatureCube, n_tiles: int = 5, buffer: int = 32) -> TileSet:
    if n_tiles <= 0:
        raise DataError(f"n_tiles must be positive, got {n_tiles}")
    if buffer < 0:
        raise DataError(f"buffer must be non-negative, got {buffer}")
    height, width = cube.shape
    if width < n_tiles:
        raise DataError(f"cannot split width {width} into {n_tiles} tiles")

    tiles = []
    for c0, c1 in _core_bounds(width, n_tiles):
        columns = np.arange(c0 - buffer, c1 + buffer) % width
        padded = (_align(height), _align(len(columns)))
        image = np.zeros((cube.n_channels,) + padded)
        image[:, :height, : len(columns)] = cube.data[:, :, columns]
        tiles.append(Tile(image, (0, height, c0, c1), padded, columns, buffer))
    return TileSet(tuple(tiles), (height, width))


def merge_tiles(tiles: TileSet, maps: Sequence[np.ndarray]) -> np.ndarray:
    """Copy each tile's core back into a full-size canvas.

    Maps are (..., H_pad, W_pad); leading axes are kept.
    """
    if len(maps) != len(tiles):
        raise DataError(f"got {len(maps)} tile maps for {len(tiles)} tiles")
    height, width = tiles.shape
    lead = np.asarray(maps[0]).shape[:-2]
    out = np.zeros(lead + (height, width), dtype=np.asarray(maps[0]).dtype)
    for part, m in zip(tiles.tiles, maps):
        m = np.asarray(m)
        if m.shape[-2:] != part.padded or m.shape[:-2] != lead:
            raise DataError(f"tile map shape {m.shape} does not match padded {part.padded}")
        _, _, c0, c1 = part.core
        out[..., :, c0:c1] = m[..., :height, part.buffer : part.buffer + c1 - c0]
    return out


def save_cube(cube: FeatureCube, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    height, width = cube.shape
    with path.open("wb") as handle:
        handle.write(_FCUB_HEADER.pack(_FCUB_MAGIC, _FCUB_VERSION, height, width, cube.n_channels))
        for name in cube.names:
            encoded = name.encode("utf-8")
            handle.write(_NAME_LEN.pack(len(encoded)))
            handle.write(encoded)
        handle.write(cube.data.astype("<f4").tobytes(order="C"))


def load_cube(path: Path) -> FeatureCube:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _FCUB_HEADER.size:
        raise DataError(f"{path.name}: truncated feature cube header")
    magic, version, height, width, channels = _FCUB_HEADER.unpack_from(blob, 0)
    if magic != _FCUB_MAGIC:
        raise DataError(f"{path.name}: not a feature cube (magic {magic!r})")
    if version != _FCUB_VERSION:
        raise DataError(f"{path.name}: unsupported feature cube version {version}")
    offset = _FCUB_HEADER.size
    names = []
    for _ in range(channels):
        if offset + _NAME_LEN.size > len(blob):
            raise DataError(f"{path.name}: truncated channel name table")
        (length,) = _NAME_LEN.unpack_from(blob, offset)
        offset += _NAME_LEN.size
        names.append(blob[offset : offset + length].decode("utf-8"))
        offset += length
    expected = channels * height * width * 4
    if len(blob) - offset != expected:
        raise DataError(f"{path.name}: expected {expected} bytes of planes, found {len(blob) - offset}")
    data = np.frombuffer(blob, dtype="<f4", offset=offset).reshape(channels, height, width)
    data = data.astype(np.float64)
    return FeatureCube(tuple(names), data, np.any(data != 0, axis=0))
