"""Lesion segmentation metrics: Dice, and component-wise false-negative /
false-positive volumes in millilitres."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .errors import ShapeError, ValidationError
from .volgrid import MaskVolume, voxel_volume_ml

_STRUCTURES = {c: ndimage.generate_binary_structure(3, r) for c, r in ((6, 1), (18, 2), (26, 3))}


@dataclass(frozen=True)
class MetricsReport:
    dice: float
    fnv_ml: float
    fpv_ml: float
    n_pred_components: int
    n_gt_components: int
    voxel_volume_ml: float

    def to_dict(self) -> dict:
        return asdict(self)


def _binary(mask) -> np.ndarray:
    data = mask.data if isinstance(mask, MaskVolume) else np.asarray(mask)
    if data.ndim != 3:
        raise ShapeError(f"mask must be 3D, got shape {data.shape}")
    if data.size and (data.min() < 0 or data.max() > 1):
        raise ValidationError("mask must be binary (values 0 and 1)")
    return data.astype(bool)


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p, g = _binary(pred), _binary(gt)
    if p.shape != g.shape:
        raise ShapeError(f"prediction shape {p.shape} != ground-truth shape {g.shape}")
    return p, g


def dice_score(pred, gt) -> float:
    """``2|P & G| / (|P| + |G|)``; two empty masks score 1.0."""
    return _dice(*_pair(pred, gt))


def _dice(p: np.ndarray, g: np.ndarray) -> float:
    total = int(np.count_nonzero(p)) + int(np.count_nonzero(g))
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(p & g)) / total


def connected_components(mask, connectivity: int = 26) -> tuple[np.ndarray, int]:
    """Label foreground regions 1..n in x-fastest scan order of their first voxel."""
    if connectivity not in _STRUCTURES:
        raise ValidationError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    return _label(_binary(mask), connectivity)


def _label(data: np.ndarray, connectivity: int) -> tuple[np.ndarray, int]:
    # ndimage scans in C order; the transpose makes that scan x-fastest
    labels, n = ndimage.label(data.T, structure=_STRUCTURES[connectivity])
    return np.ascontiguousarray(labels.T), int(n)


def _untouched_volume(source: np.ndarray, other: np.ndarray, connectivity: int) -> tuple[int, int]:
    """Voxel count of components of ``source`` with no voxel in ``other``, and the component count."""
    if connectivity not in _STRUCTURES:
        raise ValidationError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    labels, n = _label(source, connectivity)
    if n == 0:
        return 0, 0
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    hit = np.bincount(labels[other], minlength=n + 1)
    return int(sizes[1:][hit[1:] == 0].sum()), n


def _spacing(spacing, *masks):
    if spacing is not None:
        return spacing
    for m in masks:
        if isinstance(m, MaskVolume):
            return m.spacing
    raise ValidationError("spacing is required when masks are plain arrays")


def false_positive_volume(pred, gt, spacing=None, connectivity: int = 26) -> float:
    """Total mL of predicted components that do not touch the ground truth."""
    p, g = _pair(pred, gt)
    count, _ = _untouched_volume(p, g, connectivity)
    return count * voxel_volume_ml(_spacing(spacing, pred, gt))


def false_negative_volume(pred, gt, spacing=None, connectivity: int = 26) -> float:
    """Total mL of ground-truth components the prediction misses entirely."""
    p, g = _pair(pred, gt)
    count, _ = _untouched_volume(g, p, connectivity)
    return count * voxel_volume_ml(_spacing(spacing, pred, gt))


def evaluate_case(pred, gt, spacing=None, connectivity: int = 26) -> MetricsReport:
    p, g = _pair(pred, gt)
    vox_ml = voxel_volume_ml(_spacing(spacing, pred, gt))
    fp, n_pred = _untouched_volume(p, g, connectivity)
    fn, n_gt = _untouched_volume(g, p, connectivity)
    return MetricsReport(
        dice=_dice(p, g),
        fnv_ml=fn * vox_ml,
        fpv_ml=fp * vox_ml,
        n_pred_components=n_pred,
        n_gt_components=n_gt,
        voxel_volume_ml=vox_ml,
    )


def aggregate(reports: list[MetricsReport]) -> dict:
    """Mean Dice, FNV and FPV over cases."""
    if not reports:
        return {"n_cases": 0, "dice": None, "fnv_ml": None, "fpv_ml": None}
    return {
        "n_cases": len(reports),
        "dice": float(np.mean([r.dice for r in reports])),
        "fnv_ml": float(np.mean([r.fnv_ml for r in reports])),
        "fpv_ml": float(np.mean([r.fpv_ml for r in reports])),
    }
