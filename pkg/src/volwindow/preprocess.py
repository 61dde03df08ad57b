"""Deterministic per-case transforms: NaN guard, RAS reorientation,
fixed-spacing resampling and per-volume percentile intensity scaling."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import GeometryError, ValidationError
from .volgrid import Grid, MaskVolume, Volume, orientation_code

log = logging.getLogger(__name__)

_AXIS_LETTERS = (("L", "R"), ("P", "A"), ("I", "S"))


@dataclass(frozen=True)
class PreprocessConfig:
    target_spacing: tuple[float, float, float] = (2.0, 2.0, 3.0)
    lower_percentile: float = 0.05
    upper_percentile: float = 99.95
    clip: bool = True
    nan_guard: bool = True

    def __post_init__(self):
        ts = tuple(float(v) for v in self.target_spacing)
        if len(ts) != 3 or not all(math.isfinite(v) and v > 0 for v in ts):
            raise ValidationError(f"target_spacing must be 3 positive reals, got {ts}")
        object.__setattr__(self, "target_spacing", ts)
        lo, hi = float(self.lower_percentile), float(self.upper_percentile)
        if not (0 <= lo < 100 and 0 < hi <= 100 and lo < hi):
            raise ValidationError(
                f"need 0 <= lower_percentile < upper_percentile <= 100, got {lo}, {hi}"
            )


class ScaleResult(NamedTuple):
    volume: Volume
    lo: float
    hi: float
    degenerate: bool


class PreprocessResult(NamedTuple):
    volume: Volume
    replaced_nans: int
    lo: float
    hi: float
    degenerate: bool


def nan_guard(volume: Grid) -> tuple[Grid, int]:
    """Replace NaN and +/-inf voxels with 0.0; return the volume and the count."""
    data = volume.data
    bad = ~np.isfinite(data)
    count = int(bad.sum())
    if count == 0:
        return volume, 0
    fixed = np.where(bad, np.float32(0.0), data)
    return volume.with_data(fixed), count


def _ras_transform(affine: np.ndarray) -> tuple[list[int], list[bool]]:
    """For each RAS world axis, the source voxel axis and whether it runs backwards."""
    code = orientation_code(affine)
    perm, flip = [0, 0, 0], [False, False, False]
    for vox_axis, letter in enumerate(code):
        for world_axis, (neg, pos) in enumerate(_AXIS_LETTERS):
            if letter in (neg, pos):
                perm[world_axis] = vox_axis
                flip[world_axis] = letter == neg
    return perm, flip


def reorient_to_ras(volume: Grid) -> Grid:
    """Permute and flip voxel axes so indices increase toward R, A and S.

    World coordinates of every voxel are preserved.
    """
    affine = np.asarray(volume.affine, dtype=np.float64)
    if abs(np.linalg.det(affine[:3, :3])) < 1e-12:
        raise GeometryError("affine is singular")
    perm, flip = _ras_transform(affine)
    if perm == [0, 1, 2] and not any(flip):
        return volume

    shape = volume.shape
    data = np.transpose(volume.data, perm)
    # new index -> old index, as a homogeneous 4x4
    to_old = np.zeros((4, 4))
    to_old[3, 3] = 1.0
    for new_axis, old_axis in enumerate(perm):
        if flip[new_axis]:
            data = np.flip(data, axis=new_axis)
            to_old[old_axis, new_axis] = -1.0
            to_old[old_axis, 3] = shape[old_axis] - 1
        else:
            to_old[old_axis, new_axis] = 1.0
    spacing = tuple(volume.spacing[a] for a in perm)
    return type(volume)(np.ascontiguousarray(data), affine @ to_old, spacing)


def _sample_axis(data: np.ndarray, axis: int, pos: np.ndarray, nearest: bool) -> np.ndarray:
    n = data.shape[axis]
    pos = np.clip(pos, 0.0, n - 1)
    if nearest:
        return np.take(data, np.floor(pos + 0.5).astype(np.intp), axis=axis)
    i0 = np.floor(pos).astype(np.intp)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = pos - i0
    bshape = [1, 1, 1]
    bshape[axis] = -1
    frac = frac.reshape(bshape)
    return np.take(data, i0, axis=axis) * (1.0 - frac) + np.take(data, i1, axis=axis) * frac


def resample(volume: Grid, target_spacing, mode: str | None = None) -> Grid:
    """Resample to ``target_spacing`` (mm) by separable trilinear or nearest lookup.

    Output voxel ``k`` along an axis samples input continuous index
    ``(k + 0.5) * r - 0.5`` with ``r = target / source``, so the outer corner
    of the grid stays fixed. Positions beyond the grid take the edge value.
    Masks default to nearest, images to trilinear.
    """
    ts = np.asarray(target_spacing, dtype=np.float64)
    if ts.shape != (3,) or not np.all(np.isfinite(ts)) or np.any(ts <= 0):
        raise ValidationError(f"target spacing must be 3 positive reals, got {target_spacing}")
    if mode is None:
        mode = "nearest" if isinstance(volume, MaskVolume) else "trilinear"
    if mode not in ("trilinear", "nearest"):
        raise ValidationError(f"unknown resampling mode {mode!r}")

    src = np.asarray(volume.spacing, dtype=np.float64)
    ratio = ts / src
    out_shape = [max(1, int(math.floor(n * s / t + 0.5))) for n, s, t in zip(volume.shape, src, ts)]

    nearest = mode == "nearest"
    data = volume.data if nearest else volume.data.astype(np.float64)
    for axis in range(3):
        pos = (np.arange(out_shape[axis], dtype=np.float64) + 0.5) * ratio[axis] - 0.5
        data = _sample_axis(data, axis, pos, nearest)

    affine = np.array(volume.affine, dtype=np.float64)
    origin = 0.5 * ratio - 0.5
    new_affine = affine.copy()
    new_affine[:3, :3] = affine[:3, :3] * ratio
    new_affine[:3, 3] = affine[:3, :3] @ origin + affine[:3, 3]
    out_data = data if nearest else data.astype(np.float32)
    return type(volume)(out_data, new_affine, tuple(float(v) for v in ts))


def scale_intensity_percentile(volume: Volume, cfg: PreprocessConfig) -> ScaleResult:
    """Map the volume's own [lower, upper] percentile window onto [0, 1].

    Percentiles use linear interpolation between order statistics. A
    degenerate window (hi == lo) gives an all-zero volume and sets the flag.
    """
    if volume.data.size == 0:
        raise ValidationError("cannot scale an empty volume")
    values = volume.data.astype(np.float64)
    lo, hi = np.percentile(values, [cfg.lower_percentile, cfg.upper_percentile])
    lo, hi = float(lo), float(hi)
    if not hi > lo:
        log.warning("degenerate intensity window (lo == hi == %g); output set to zero", lo)
        return ScaleResult(volume.with_data(np.zeros(volume.shape, np.float32)), lo, hi, True)
    out = (values - lo) / (hi - lo)
    if cfg.clip:
        out = np.clip(out, 0.0, 1.0)
    return ScaleResult(volume.with_data(out.astype(np.float32)), lo, hi, False)


def preprocess_image(volume: Volume, cfg: PreprocessConfig = PreprocessConfig()) -> PreprocessResult:
    """Full image chain: nan_guard, reorient, resample, intensity scale."""
    replaced = 0
    if cfg.nan_guard:
        volume, replaced = nan_guard(volume)
        if replaced:
            log.info("replaced %d non-finite voxels", replaced)
    volume = reorient_to_ras(volume)
    volume = resample(volume, cfg.target_spacing, "trilinear")
    scaled = scale_intensity_percentile(volume, cfg)
    out = scaled.volume
    if cfg.nan_guard:
        # a second pass catches anything produced downstream of the first
        out, late = nan_guard(out)
        replaced += late
    return PreprocessResult(out, replaced, scaled.lo, scaled.hi, scaled.degenerate)


def preprocess_mask(mask: MaskVolume, cfg: PreprocessConfig = PreprocessConfig()) -> MaskVolume:
    """Geometry-only chain for label maps: reorient, then nearest resampling."""
    return resample(reorient_to_ras(mask), cfg.target_spacing, "nearest")
