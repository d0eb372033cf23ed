"""Point-cloud container, PLY I/O, spatial index and subsampling."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from plyfile import PlyData, PlyElement, PlyElementParseError, PlyHeaderParseError
from scipy.spatial import cKDTree

from .errors import DataError, PlyFormatError

_LOGGER = logging.getLogger(__name__)

DEFAULT_SEED = 42


class ClassInfo(NamedTuple):
    id: int
    name: str
    color: tuple[int, int, int]


DEFAULT_CLASSES: tuple[ClassInfo, ...] = (
    ClassInfo(0, "Void", (0, 0, 0)),
    ClassInfo(1, "Ground & Water", (140, 110, 60)),
    ClassInfo(2, "Stem", (200, 60, 40)),
    ClassInfo(3, "Canopy", (40, 170, 60)),
    ClassInfo(4, "Root", (230, 180, 40)),
    ClassInfo(5, "Object", (60, 120, 220)),
)


class Point3(NamedTuple):
    x: float
    y: float
    z: float
    intensity: float | None = None
    label: int | None = None


@dataclass(frozen=True)
class ScanMeta:
    scanner_origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    class_names: tuple[ClassInfo, ...] = DEFAULT_CLASSES
    source_id: str = ""

    def __post_init__(self) -> None:
        ids = [info.id for info in self.class_names]
        if ids != list(range(len(ids))):
            raise DataError(f"class ids must be dense from 0, got {ids}")
        if ids and self.class_names[0].name.lower() != "void":
            raise DataError("class id 0 is reserved for Void")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)


@dataclass(frozen=True)
class PointCloud:
    xyz: np.ndarray
    intensity: np.ndarray | None = None
    labels: np.ndarray | None = None
    colors: np.ndarray | None = None
    meta: ScanMeta = field(default_factory=ScanMeta)

    def __post_init__(self) -> None:
        xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(xyz)):
            raise DataError("point coordinates must be finite")
        object.__setattr__(self, "xyz", xyz)
        n = len(xyz)
        if self.intensity is not None:
            intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if len(intensity) != n:
                raise DataError(f"intensity has {len(intensity)} values for {n} points")
            if np.any(intensity < 0):
                raise DataError("intensity must be nonnegative")
            object.__setattr__(self, "intensity", intensity)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if len(labels) != n:
                raise DataError(f"labels has {len(labels)} values for {n} points")
            if np.any(labels < 0):
                raise DataError("labels must be nonnegative class ids")
            object.__setattr__(self, "labels", labels)
        if self.colors is not None:
            colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
            if len(colors) != n:
                raise DataError(f"colors has {len(colors)} rows for {n} points")
            object.__setattr__(self, "colors", colors)

    def __len__(self) -> int:
        return len(self.xyz)

    @classmethod
    def from_points(cls, points: Iterable[Point3], meta: ScanMeta | None = None) -> PointCloud:
        rows = list(points)
        xyz = np.array([[p.x, p.y, p.z] for p in rows], dtype=np.float64).reshape(-1, 3)
        intensity = None
        labels = None
        if rows and all(p.intensity is not None for p in rows):
            intensity = np.array([p.intensity for p in rows], dtype=np.float64)
        if rows and all(p.label is not None for p in rows):
            labels = np.array([p.label for p in rows], dtype=np.int64)
        return cls(xyz, intensity, labels, meta=meta or ScanMeta())

    def point(self, idx: int) -> Point3:
        x, y, z = (float(v) for v in self.xyz[idx])
        intensity = float(self.intensity[idx]) if self.intensity is not None else None
        label = int(self.labels[idx]) if self.labels is not None else None
        return Point3(x, y, z, intensity, label)

    @property
    def origin(self) -> np.ndarray:
        return np.asarray(self.meta.scanner_origin, dtype=np.float64)

    def with_labels(self, labels: np.ndarray | None) -> PointCloud:
        return replace(self, labels=labels)

    def with_colors(self, colors: np.ndarray | None) -> PointCloud:
        return replace(self, colors=colors)

    def take(self, ids: np.ndarray) -> PointCloud:
        ids = np.asarray(ids, dtype=np.int64)
        return PointCloud(
            self.xyz[ids],
            None if self.intensity is None else self.intensity[ids],
            None if self.labels is None else self.labels[ids],
            None if self.colors is None else self.colors[ids],
            self.meta,
        )


@dataclass(frozen=True)
class AdaptiveRadiusSpec:
    lam: float = 1.5
    k_ref: int = 10
    r_min: float = 0.02
    r_max: float = 0.3

    def __post_init__(self) -> None:
        if not self.lam > 0:
            raise DataError(f"radius scale lambda must be positive, got {self.lam}")
        if not isinstance(self.k_ref, int) or self.k_ref < 1:
            raise DataError(f"k_ref must be a positive int, got {self.k_ref}")
        if not (0 < self.r_min <= self.r_max):
            raise DataError(f"need 0 < r_min <= r_max, got [{self.r_min}, {self.r_max}]")


class SpatialIndex:
    """Balanced k-d tree over point positions; neighbor queries exclude the query point."""

    def __init__(self, xyz: np.ndarray, workers: int = 1) -> None:
        self._xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        self._tree = cKDTree(self._xyz, balanced_tree=True)
        self._workers = workers

    @classmethod
    def from_cloud(cls, cloud: PointCloud, workers: int = 1) -> SpatialIndex:
        return cls(cloud.xyz, workers)

    @property
    def size(self) -> int:
        return len(self._xyz)

    @property
    def positions(self) -> np.ndarray:
        return self._xyz

    def _check_id(self, point_id: int) -> None:
        if not 0 <= point_id < self.size:
            raise DataError(f"point id {point_id} out of range [0, {self.size})")

    def query(self, point_id: int, k: int) -> tuple[np.ndarray, np.ndarray]:
        dists, ids = self.query_batch(np.array([point_id]), k)
        return dists[0], ids[0]

    def query_batch(self, point_ids: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        point_ids = np.asarray(point_ids, dtype=np.int64).reshape(-1)
        if point_ids.size and (point_ids.min() < 0 or point_ids.max() >= self.size):
            raise DataError(f"point ids out of range [0, {self.size})")
        k_eff = min(k, self.size - 1)
        if k_eff <= 0 or point_ids.size == 0:
            empty = np.zeros((len(point_ids), 0))
            return empty, empty.astype(np.int64)
        dists, ids = self._tree.query(self._xyz[point_ids], k=k_eff + 1, workers=self._workers)
        dists = dists.reshape(len(point_ids), k_eff + 1)
        ids = ids.reshape(len(point_ids), k_eff + 1)
        keep = ids != point_ids[:, None]
        # duplicates can push the query point itself out of the k+1 set
        missing_self = keep.all(axis=1)
        keep[missing_self, -1] = False
        return dists[keep].reshape(-1, k_eff), ids[keep].reshape(-1, k_eff).astype(np.int64)

    def within(self, point_id: int, radius: float) -> np.ndarray:
        self._check_id(point_id)
        if not radius > 0:
            raise DataError(f"radius must be positive, got {radius}")
        found = np.asarray(self._tree.query_ball_point(self._xyz[point_id], radius), dtype=np.int64)
        found = found[found != point_id]
        dists = np.linalg.norm(self._xyz[found] - self._xyz[point_id], axis=1)
        return found[np.lexsort((found, dists))]


def _comment_lines(meta: ScanMeta) -> list[str]:
    ox, oy, oz = meta.scanner_origin
    lines = [f"scanner_origin {ox!r} {oy!r} {oz!r}"]
    if meta.source_id:
        lines.append(f"source_id {meta.source_id}")
    for info in meta.class_names:
        r, g, b = info.color
        lines.append(f"class {info.id} {r} {g} {b} {info.name}")
    return lines


def _parse_comments(comments: Sequence[str], fallback_id: str) -> ScanMeta:
    origin = (0.0, 0.0, 0.0)
    source_id = fallback_id
    classes: list[ClassInfo] = []
    for comment in comments:
        parts = comment.strip().split(" ")
        try:
            if parts[0] == "scanner_origin" and len(parts) == 4:
                origin = (float(parts[1]), float(parts[2]), float(parts[3]))
            elif parts[0] == "source_id" and len(parts) >= 2:
                source_id = " ".join(parts[1:])
            elif parts[0] == "class" and len(parts) >= 6:
                color = (int(parts[2]), int(parts[3]), int(parts[4]))
                classes.append(ClassInfo(int(parts[1]), " ".join(parts[5:]), color))
        except ValueError:
            _LOGGER.warning("Ignoring malformed PLY comment '%s'", comment)
    class_names = tuple(sorted(classes)) if classes else DEFAULT_CLASSES
    return ScanMeta(origin, class_names, source_id)


def _scalar_column(vertex: PlyElement, name: str, kinds: str, path: Path) -> np.ndarray:
    dtype = vertex.data.dtype[name]
    if dtype.kind not in kinds:
        raise PlyFormatError(
            f"{path.name}: unsupported type '{dtype}' for vertex property '{name}'"
        )
    return np.asarray(vertex.data[name])


def load_ply(path: Path) -> PointCloud:
    path = Path(path)
    try:
        ply = PlyData.read(str(path))
    except PlyHeaderParseError as exc:
        raise PlyFormatError(f"{path.name}: header line {exc.line}: {exc.message}") from exc
    except PlyElementParseError as exc:
        element = exc.element.name if exc.element is not None else "?"
        raise PlyFormatError(
            f"{path.name}: element '{element}' row {exc.row}: {exc.message}"
        ) from exc
    except (ValueError, KeyError, EOFError) as exc:
        raise PlyFormatError(f"{path.name}: {exc}") from exc

    if "vertex" not in [el.name for el in ply.elements]:
        raise PlyFormatError(f"{path.name}: header declares no 'vertex' element")
    vertex = ply["vertex"]
    names = set(vertex.data.dtype.names or ())
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise PlyFormatError(f"{path.name}: header is missing vertex property '{axis}'")

    xyz = np.column_stack([_scalar_column(vertex, axis, "f", path) for axis in ("x", "y", "z")])
    intensity = None
    if "intensity" in names:
        intensity = _scalar_column(vertex, "intensity", "fiu", path)
    labels = None
    if "label" in names:
        labels = _scalar_column(vertex, "label", "iu", path)
    colors = None
    if {"red", "green", "blue"} <= names:
        colors = np.column_stack(
            [_scalar_column(vertex, ch, "iu", path) for ch in ("red", "green", "blue")]
        )
    meta = _parse_comments(ply.comments, path.stem)
    return PointCloud(xyz, intensity, labels, colors, meta)


def save_ply(cloud: PointCloud, path: Path, binary: bool = True) -> None:
    fields: list[tuple[str, str]] = [("x", "f4"), ("y", "f4"), ("z", "f4")]
    if cloud.intensity is not None:
        fields.append(("intensity", "f4"))
    if cloud.labels is not None:
        if cloud.labels.size and cloud.labels.max() > 255:
            raise DataError("labels above 255 do not fit the uchar label property")
        fields.append(("label", "u1"))
    if cloud.colors is not None:
        fields.extend([("red", "u1"), ("green", "u1"), ("blue", "u1")])

    records = np.empty(len(cloud), dtype=fields)
    records["x"], records["y"], records["z"] = cloud.xyz.T
    if cloud.intensity is not None:
        records["intensity"] = cloud.intensity
    if cloud.labels is not None:
        records["label"] = cloud.labels
    if cloud.colors is not None:
        records["red"], records["green"], records["blue"] = cloud.colors.T

    element = PlyElement.describe(records, "vertex")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PlyData(
        [element], text=not binary, byte_order="<", comments=_comment_lines(cloud.meta)
    ).write(str(path))


def recenter(cloud: PointCloud, center: Sequence[float]) -> PointCloud:
    center_arr = np.asarray(center, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(center_arr)):
        raise DataError("recenter needs a finite center")
    meta = replace(cloud.meta, scanner_origin=(0.0, 0.0, 0.0))
    return replace(cloud, xyz=cloud.xyz - center_arr, meta=meta)


def split_pseudo_scans(cloud: PointCloud, centers_xy: np.ndarray) -> list[PointCloud]:
    """Split a registered plot into one recentered cloud per pseudo-scanner position."""
    centers = np.asarray(centers_xy, dtype=np.float64).reshape(-1, 2)
    if len(centers) == 0:
        raise DataError("need at least one pseudo-scanner center")
    _, owner = cKDTree(centers).query(cloud.xyz[:, :2])
    scans: list[PointCloud] = []
    for k, (cx, cy) in enumerate(centers):
        ids = np.flatnonzero(owner == k)
        if ids.size == 0:
            _LOGGER.warning("Pseudo-scanner center %d owns no points, skipping", k)
            continue
        part = cloud.take(ids)
        part = replace(part, meta=replace(part.meta, source_id=f"{cloud.meta.source_id}_{k:02d}"))
        scans.append(recenter(part, (cx, cy, float(part.xyz[:, 2].mean()))))
    return scans


def adaptive_radii(
    index: SpatialIndex, point_ids: np.ndarray, spec: AdaptiveRadiusSpec
) -> np.ndarray:
    if index.size <= spec.k_ref:
        raise DataError(
            f"adaptive radius needs more than k_ref={spec.k_ref} points, cloud has {index.size}"
        )
    dists, _ = index.query_batch(point_ids, spec.k_ref)
    return np.clip(spec.lam * dists[:, -1], spec.r_min, spec.r_max)


def adaptive_radius(index: SpatialIndex, point_id: int, spec: AdaptiveRadiusSpec) -> float:
    index._check_id(point_id)
    return float(adaptive_radii(index, np.array([point_id]), spec)[0])


def neighbors_in_radius(index: SpatialIndex, point_id: int, radius: float) -> np.ndarray:
    return index.within(point_id, radius)


def voxel_downsample(xyz: np.ndarray, voxel: float) -> np.ndarray:
    """Ids of the point nearest each occupied voxel's centroid, ascending."""
    if xyz.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    keys = np.floor(xyz / voxel).astype(np.int64)
    _, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    n_voxels = int(inverse.max()) + 1
    counts = np.bincount(inverse, minlength=n_voxels)
    centroid = np.column_stack(
        [np.bincount(inverse, weights=xyz[:, d], minlength=n_voxels) for d in range(3)]
    ) / counts[:, None]
    dist = np.linalg.norm(xyz - centroid[inverse], axis=1)
    ids = np.arange(len(xyz))
    order = np.lexsort((ids, dist, inverse))
    first = np.ones(len(order), dtype=bool)
    first[1:] = inverse[order][1:] != inverse[order][:-1]
    return np.sort(order[first])


def hybrid_subsample(
    cloud: PointCloud,
    target: int,
    rare_frac: float = 0.05,
    voxel: float = 0.01,
    seed: int = DEFAULT_SEED,
    rare_threshold: float = 0.01,
) -> PointCloud:
    if target <= 0:
        raise DataError(f"target point count must be positive, got {target}")
    if cloud.labels is None:
        raise DataError("hybrid subsampling needs a labeled cloud")
    n = len(cloud)
    if target >= n:
        _LOGGER.warning("Target %d >= cloud size %d, keeping every point", target, n)
        return cloud

    rng = np.random.default_rng(seed)
    classes, counts = np.unique(cloud.labels, return_counts=True)
    rare = classes[counts / n <= rare_threshold]
    rare_budget = int(round(rare_frac * target))
    per_class = max(1, rare_budget // len(rare)) if len(rare) else 0

    kept: list[np.ndarray] = []
    for cls in rare:
        ids = np.flatnonzero(cloud.labels == cls)
        take = min(per_class, ids.size)
        kept.append(np.sort(rng.choice(ids, size=take, replace=False)))
    rare_ids = np.concatenate(kept) if kept else np.zeros(0, dtype=np.int64)

    common_ids = np.flatnonzero(~np.isin(cloud.labels, rare))
    survivors = common_ids[voxel_downsample(cloud.xyz[common_ids], voxel)]
    budget = max(target - rare_ids.size, 0)
    if survivors.size > budget:
        _LOGGER.info(
            "Voxel grid left %d points for a budget of %d; sampling down at random",
            survivors.size,
            budget,
        )
        survivors = np.sort(rng.choice(survivors, size=budget, replace=False))
    chosen = np.sort(np.concatenate([rare_ids, survivors]))
    _LOGGER.debug(
        "Hybrid subsample: %d rare classes, %d rare points, %d voxel survivors",
        len(rare),
        rare_ids.size,
        survivors.size,
    )
    return cloud.take(chosen)

