"""PNG exchange for label masks and map previews."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import imageio.v3 as iio
import matplotlib
import numpy as np

from .errors import DataError
from .features import FeatureCube
from .pointcloud import ClassInfo


def write_png(image: np.ndarray, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    iio.imwrite(path, image, extension=".png")


def write_label_png(labels: np.ndarray, path: Path) -> None:
    """Single-channel 8-bit mask, pixel value = class id."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise DataError(f"label mask must be 2-D, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise DataError("label ids must fit in 8 bits")
    write_png(labels.astype(np.uint8), path)


def read_label_png(path: Path, shape: tuple[int, int] | None = None) -> np.ndarray:
    path = Path(path)
    try:
        image = iio.imread(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"{path.name}: cannot read mask ({exc})") from exc
    if image.ndim != 2:
        raise DataError(f"{path.name}: label masks must be single-channel, got shape {image.shape}")
    if shape is not None and image.shape != tuple(shape):
        raise DataError(f"{path.name}: mask shape {image.shape} does not match grid {tuple(shape)}")
    return image.astype(np.int64)


def label_palette_image(labels: np.ndarray, classes: Sequence[ClassInfo]) -> np.ndarray:
    palette = np.zeros((256, 3), dtype=np.uint8)
    for info in classes:
        palette[info.id] = info.color
    return palette[np.clip(np.asarray(labels, dtype=np.int64), 0, 255)]


def _unit_scale(values: np.ndarray, valid: np.ndarray) -> np.ndarray:
    out = np.zeros(values.shape, dtype=np.float64)
    if valid.any():
        inside = values[valid]
        lo, hi = inside.min(), inside.max()
        if hi > lo:
            out[valid] = (inside - lo) / (hi - lo)
    return out


def feature_preview(cube: FeatureCube, channels: Sequence[str] | None = None) -> np.ndarray:
    """8-bit RGB of three channels, or grayscale of one."""
    names = list(channels) if channels is not None else list(cube.names[:3])
    if len(names) not in (1, 3):
        raise DataError(f"preview needs 1 or 3 channels, got {names}")
    planes = [np.clip(cube.channel(name), 0.0, 1.0) for name in names]
    rgb = np.stack(planes * (3 if len(planes) == 1 else 1), axis=-1)
    rgb[~cube.valid_mask] = 0.0
    return np.round(rgb * 255.0).astype(np.uint8)


def uncertainty_preview(values: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Min-max scaled map in the "hot" palette; void pixels are black."""
    valid = np.asarray(valid, dtype=bool)
    scaled = _unit_scale(np.asarray(values, dtype=np.float64), valid)
    rgb = matplotlib.colormaps["hot"](scaled)[..., :3]
    rgb[~valid] = 0.0
    return np.round(rgb * 255.0).astype(np.uint8)
