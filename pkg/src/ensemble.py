"""Ensemble fusion, uncertainty maps, losses and the forest baseline segmenter."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import entr, softmax

from .errors import DataError
from .features import FeatureCube, TileSet, merge_tiles
from .forest import RandomForest

_LOGGER = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
SUM_TOL = 1e-6
MERGE_ORDERS = ("fuse_then_merge", "merge_then_fuse")

_LGTS_MAGIC = b"LGTS"
_LGTS_VERSION = 1
_LGTS_HEADER = struct.Struct("<4sHIIII")


@dataclass(frozen=True)
class LogitStack:
    logits: np.ndarray

    def __post_init__(self) -> None:
        logits = np.asarray(self.logits, dtype=np.float64)
        if logits.ndim != 4:
            raise DataError(f"logit stack must be M x C x H x W, got shape {logits.shape}")
        if logits.shape[0] < 1 or logits.shape[1] < 2:
            raise DataError(f"need M >= 1 models and C >= 2 classes, got {logits.shape[:2]}")
        if not np.all(np.isfinite(logits)):
            raise DataError("logit stack contains non-finite values")
        object.__setattr__(self, "logits", logits)

    @property
    def n_models(self) -> int:
        return self.logits.shape[0]

    @property
    def n_classes(self) -> int:
        return self.logits.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.logits.shape[2], self.logits.shape[3]


@dataclass(frozen=True)
class UncertaintyMaps:
    total: np.ndarray
    expected: np.ndarray
    epistemic: np.ndarray

    def as_cube(self, valid: np.ndarray) -> FeatureCube:
        return FeatureCube(
            ("total", "expected", "epistemic"),
            np.stack([self.total, self.expected, self.epistemic]),
            valid,
        )


def fuse(stack: LogitStack) -> tuple[np.ndarray, np.ndarray]:
    mean = stack.logits.mean(axis=0)
    # argmax keeps the first maximum, i.e. the smallest class id
    return softmax(mean, axis=0), np.argmax(mean, axis=0).astype(np.int64)


def uncertainty(stack: LogitStack) -> UncertaintyMaps:
    fused = softmax(stack.logits.mean(axis=0), axis=0)
    total = entr(fused).sum(axis=0)
    members = softmax(stack.logits, axis=1)
    expected = entr(members).sum(axis=1).mean(axis=0)
    # averaging logits can put the fused entropy slightly under the mean member entropy
    epistemic = np.maximum(total - expected, 0.0)
    return UncertaintyMaps(total, expected, epistemic)


def _loss_mask(shape: tuple[int, ...], mask: np.ndarray | None) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise DataError(f"loss mask shape {mask.shape} does not match {shape}")
    return mask


def dice_loss(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DataError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    if not np.isin(gt, (0, 1)).all():
        raise DataError("dice ground truth must be binary")
    keep = _loss_mask(gt.shape, mask)
    p = pred[keep]
    g = gt[keep].astype(np.float64)
    denom = p.sum() + g.sum()
    if denom == 0:
        return 0.0
    return float(1.0 - 2.0 * (p * g).sum() / denom)


def multiclass_dice_loss(
    probabilities: np.ndarray, labels: np.ndarray, mask: np.ndarray | None = None
) -> float:
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels)
    if probabilities.shape[1:] != labels.shape:
        raise DataError(f"probabilities {probabilities.shape} do not match labels {labels.shape}")
    losses = [
        dice_loss(probabilities[c], (labels == c).astype(np.int64), mask)
        for c in range(len(probabilities))
    ]
    return float(np.mean(losses))


def cross_entropy_loss(
    probabilities: np.ndarray, labels: np.ndarray, mask: np.ndarray | None = None
) -> float:
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probabilities.shape[1:] != labels.shape:
        raise DataError(f"probabilities {probabilities.shape} do not match labels {labels.shape}")
    if np.any(np.abs(probabilities.sum(axis=0) - 1.0) > SUM_TOL):
        raise DataError("class probabilities must sum to 1 at every pixel")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= len(probabilities):
        raise DataError(f"labels outside [0, {len(probabilities)})")
    keep = _loss_mask(labels.shape, mask)
    if not keep.any():
        return 0.0
    picked = np.take_along_axis(probabilities, labels[None], axis=0)[0]
    return float(-np.log(np.maximum(picked[keep], PROB_FLOOR)).mean())


def combined_loss(
    probabilities: np.ndarray, labels: np.ndarray, mask: np.ndarray | None = None
) -> float:
    return 0.5 * multiclass_dice_loss(probabilities, labels, mask) + 0.5 * cross_entropy_loss(
        probabilities, labels, mask
    )


def _member_seeds(seed: int | Sequence[int], members: int) -> list[int]:
    if isinstance(seed, (int, np.integer)):
        return [int(seed) + m for m in range(members)]
    seeds = [int(s) for s in seed]
    if len(seeds) != members:
        raise DataError(f"got {len(seeds)} seeds for {members} ensemble members")
    return seeds


def train_baseline(
    cube: FeatureCube,
    train_mask: np.ndarray,
    members: int = 3,
    seed: int | Sequence[int] = 42,
    n_trees: int = 25,
    max_depth: int | None = 12,
    workers: int = 1,
) -> list[RandomForest]:
    """One forest per member, each on a bootstrap of the labeled valid pixels."""
    train_mask = np.asarray(train_mask, dtype=np.int64)
    if train_mask.shape != cube.shape:
        raise DataError(f"train mask shape {train_mask.shape} does not match cube {cube.shape}")
    if members < 1:
        raise DataError(f"ensemble needs at least one member, got {members}")
    labeled = cube.valid_mask & (train_mask > 0)
    x = cube.data[:, labeled].T
    y = train_mask[labeled]
    if len(np.unique(y)) < 2:
        raise DataError("baseline training needs at least 2 labeled classes on valid pixels")

    forests = []
    for member_seed in _member_seeds(seed, members):
        rng = np.random.default_rng(member_seed)
        sample = rng.integers(0, len(y), size=len(y))
        forest = RandomForest(n_trees, max_depth, seed=member_seed, workers=workers)
        forests.append(forest.fit(x[sample], y[sample]))
    _LOGGER.info("trained %d baseline members on %d labeled pixels", members, len(y))
    return forests


def baseline_logits(forests: Sequence[RandomForest], data: np.ndarray, n_classes: int) -> LogitStack:
    """Laplace-smoothed log vote fractions for every pixel of a (C_in, H, W) array."""
    channels, height, width = data.shape
    x = data.reshape(channels, -1).T
    logits = np.zeros((len(forests), n_classes, height * width))
    for m, forest in enumerate(forests):
        if forest.classes_.max() >= n_classes:
            raise DataError(f"forest predicts class {forest.classes_.max()} >= {n_classes}")
        votes = np.zeros((n_classes, height * width))
        votes[forest.classes_] = forest.vote_counts(x).T
        logits[m] = np.log((votes + 1.0) / (forest.n_trees + n_classes))
    return LogitStack(logits.reshape(len(forests), n_classes, height, width))


def baseline_segment(
    cube: FeatureCube,
    train_mask: np.ndarray,
    members: int = 3,
    seed: int | Sequence[int] = 42,
    n_classes: int | None = None,
    n_trees: int = 25,
    max_depth: int | None = 12,
    workers: int = 1,
) -> LogitStack:
    train_mask = np.asarray(train_mask, dtype=np.int64)
    classes = n_classes if n_classes is not None else max(2, int(train_mask.max()) + 1)
    forests = train_baseline(cube, train_mask, members, seed, n_trees, max_depth, workers)
    return baseline_logits(forests, cube.data, classes)


def fuse_tiles(
    stacks: Sequence[LogitStack], tiles: TileSet, order: str = "fuse_then_merge"
) -> tuple[np.ndarray, np.ndarray, UncertaintyMaps]:
    """Fused probabilities, labels and uncertainty over the full grid from per-tile logits."""
    if order not in MERGE_ORDERS:
        raise DataError(f"unknown merge order '{order}', expected one of {MERGE_ORDERS}")
    if order == "merge_then_fuse":
        merged = LogitStack(merge_tiles(tiles, [s.logits for s in stacks]))
        probabilities, labels = fuse(merged)
        return probabilities, labels, uncertainty(merged)

    fused = [fuse(s) for s in stacks]
    maps = [uncertainty(s) for s in stacks]
    probabilities = merge_tiles(tiles, [p for p, _ in fused])
    labels = merge_tiles(tiles, [lab for _, lab in fused])
    merged_maps = UncertaintyMaps(
        merge_tiles(tiles, [m.total for m in maps]),
        merge_tiles(tiles, [m.expected for m in maps]),
        merge_tiles(tiles, [m.epistemic for m in maps]),
    )
    return probabilities, labels, merged_maps


def pseudo_labels(
    probabilities: np.ndarray,
    maps: UncertaintyMaps,
    min_confidence: float = 0.9,
    max_epistemic: float = 0.05,
    valid: np.ndarray | None = None,
) -> np.ndarray:
    """Fused labels where the ensemble is confident and agrees; Void elsewhere."""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels = np.argmax(probabilities, axis=0).astype(np.int64)
    keep = (probabilities.max(axis=0) >= min_confidence) & (maps.epistemic <= max_epistemic)
    if valid is not None:
        keep &= np.asarray(valid, dtype=bool)
    return np.where(keep, labels, 0)


def rank_queries(epistemic: np.ndarray, tiles: TileSet, top: int | None = None) -> list[dict]:
    epistemic = np.asarray(epistemic, dtype=np.float64)
    if epistemic.shape != tiles.shape:
        raise DataError(f"epistemic map {epistemic.shape} does not match tiles {tiles.shape}")
    ranked = []
    for k, part in enumerate(tiles.tiles):
        r0, r1, c0, c1 = part.core
        ranked.append(
            {
                "tile": k,
                "core": [r0, r1, c0, c1],
                "mean_epistemic": float(epistemic[r0:r1, c0:c1].mean()),
            }
        )
    ranked.sort(key=lambda item: (-item["mean_epistemic"], item["tile"]))
    return ranked if top is None else ranked[:top]


def save_logits(stack: LogitStack, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    m, c, h, w = stack.logits.shape
    with path.open("wb") as handle:
        handle.write(_LGTS_HEADER.pack(_LGTS_MAGIC, _LGTS_VERSION, m, c, h, w))
        handle.write(stack.logits.astype("<f4").tobytes(order="C"))


def load_logits(path: Path) -> LogitStack:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _LGTS_HEADER.size:
        raise DataError(f"{path.name}: truncated logit stack header")
    magic, version, m, c, h, w = _LGTS_HEADER.unpack_from(blob, 0)
    if magic != _LGTS_MAGIC:
        raise DataError(f"{path.name}: not a logit stack (magic {magic!r})")
    if version != _LGTS_VERSION:
        raise DataError(f"{path.name}: unsupported logit stack version {version}")
    expected = m * c * h * w * 4
    if len(blob) - _LGTS_HEADER.size != expected:
        raise DataError(f"{path.name}: expected {expected} bytes of logits")
    data = np.frombuffer(blob, dtype="<f4", offset=_LGTS_HEADER.size).reshape(m, c, h, w)
    return LogitStack(data.astype(np.float64))
