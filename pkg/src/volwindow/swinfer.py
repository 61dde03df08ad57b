"""Sliding-window inference with Gaussian-weighted stitching and ensemble voting."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ValidationError
from .volgrid import MaskVolume, Volume

WEIGHT_FLOOR = 1e-3


@dataclass(frozen=True)
class BlendMode:
    kind: str = "gaussian"
    sigma_scale: float = 0.125

    def __post_init__(self):
        if self.kind not in ("constant", "gaussian"):
            raise ValidationError(f"blend kind must be 'constant' or 'gaussian', got {self.kind!r}")
        if not self.sigma_scale > 0:
            raise ValidationError("sigma_scale must be positive")


@dataclass(frozen=True)
class TilePlan:
    roi: tuple[int, int, int]
    overlap: float
    tiles: tuple[tuple[tuple[int, int, int], tuple[int, int, int]], ...]
    padded_shape: tuple[int, int, int]
    pad_before: tuple[int, int, int]

    def __len__(self):
        return len(self.tiles)

    def to_dict(self) -> dict:
        return {
            "roi": list(self.roi),
            "overlap": self.overlap,
            "padded_shape": list(self.padded_shape),
            "pad_before": list(self.pad_before),
            "n_tiles": len(self.tiles),
            "tiles": [[list(s), list(e)] for s, e in self.tiles],
        }


def _triple(v, name) -> tuple[int, int, int]:
    t = tuple(int(x) for x in v)
    if len(t) != 3 or min(t) < 1:
        raise ValidationError(f"{name} must be 3 positive integers, got {v}")
    return t


def axis_starts(dim: int, roi: int, overlap: float) -> list[int]:
    """Window starts along one (already padded) axis of length ``dim >= roi``."""
    step = max(1, int(math.floor(roi * (1.0 - overlap))))
    starts = list(range(0, dim - roi + 1, step))
    if starts[-1] != dim - roi:
        starts.append(dim - roi)
    return starts


def plan_tiles(volume_shape, roi=(128, 128, 128), overlap: float = 0.75) -> TilePlan:
    """Cover ``volume_shape`` with ``roi`` windows at the given fractional overlap.

    Axes shorter than the ROI are zero-padded symmetrically up to it. Tiles
    are ordered with z slowest and x fastest.
    """
    shape = _triple(volume_shape, "volume_shape")
    roi = _triple(roi, "roi")
    if not 0.0 <= overlap < 1.0:
        raise ValidationError(f"overlap must lie in [0, 1), got {overlap}")
    padded = tuple(max(d, r) for d, r in zip(shape, roi))
    pad_before = tuple((p - d) // 2 for p, d in zip(padded, shape))
    sx, sy, sz = (axis_starts(p, r, overlap) for p, r in zip(padded, roi))
    tiles = tuple(
        ((x, y, z), (x + roi[0], y + roi[1], z + roi[2])) for z in sz for y in sy for x in sx
    )
    return TilePlan(roi, float(overlap), tiles, padded, pad_before)


def gaussian_importance(roi, sigma_scale: float = 0.125) -> np.ndarray:
    """Separable Gaussian weight map peaking at the ROI center, normalized to peak 1.

    Weights below ``1e-3`` of the peak are raised to that floor so every
    voxel keeps a nonzero weight.
    """
    roi = _triple(roi, "roi")
    if not sigma_scale > 0:
        raise ValidationError("sigma_scale must be positive")
    profiles = []
    for n in roi:
        c = (n - 1) / 2.0
        sigma = sigma_scale * n
        i = np.arange(n, dtype=np.float64)
        profiles.append(np.exp(-0.5 * ((i - c) / sigma) ** 2))
    w = profiles[0][:, None, None] * profiles[1][None, :, None] * profiles[2][None, None, :]
    w /= w.max()
    return np.maximum(w, WEIGHT_FLOOR)


def importance_map(roi, blend: BlendMode) -> np.ndarray:
    if blend.kind == "constant":
        return np.ones(_triple(roi, "roi"))
    return gaussian_importance(roi, blend.sigma_scale)


def sliding_window_infer(
    volume,
    predictor: Callable[[np.ndarray], np.ndarray],
    roi=(128, 128, 128),
    overlap: float = 0.75,
    blend: BlendMode = BlendMode(),
    jobs: int = 1,
) -> np.ndarray:
    """Stitch per-tile predictions into a ``(C, X, Y, Z)`` float32 array.

    ``volume`` is a :class:`Volume`, a 3D array or a channel-first 4D array.
    The predictor receives ``(C_in, *roi)`` patches and must return
    ``(C_out, *roi)``. Tiles may be predicted concurrently with ``jobs > 1``
    but are accumulated in plan order, so results do not depend on ``jobs``.
    """
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    if data.ndim == 3:
        data = data[None]
    if data.ndim != 4:
        raise ValidationError(f"expected (X, Y, Z) or (C, X, Y, Z) input, got shape {data.shape}")
    if not np.all(np.isfinite(data)):
        raise ValidationError("input contains non-finite values; run nan_guard first")
    shape = data.shape[1:]
    plan = plan_tiles(shape, roi, overlap)
    roi = plan.roi

    pad = [(0, 0)] + [(b, p - d - b) for b, p, d in zip(plan.pad_before, plan.padded_shape, shape)]
    padded = np.pad(data, pad) if any(w != (0, 0) for w in pad) else data
    weight = importance_map(roi, blend)

    def run(tile):
        (x, y, z), (x1, y1, z1) = tile
        out = np.asarray(predictor(padded[:, x:x1, y:y1, z:z1]))
        if out.ndim != 4 or out.shape[1:] != roi:
            raise ContractError(f"predictor returned shape {out.shape}; expected (C, {roi})")
        return out

    acc = lo = hi = None
    wsum = np.zeros(plan.padded_shape)
    out_dtype = None

    def accumulate(tile, pred):
        nonlocal acc, lo, hi, out_dtype
        if acc is None:
            acc = np.zeros((pred.shape[0], *plan.padded_shape))
            lo = np.full(acc.shape, np.inf)
            hi = np.full(acc.shape, -np.inf)
            out_dtype = np.result_type(pred.dtype, np.float32)
        elif pred.shape[0] != acc.shape[0]:
            raise ContractError("predictor changed its channel count between tiles")
        (x, y, z), (x1, y1, z1) = tile
        region = (slice(x, x1), slice(y, y1), slice(z, z1))
        cregion = (slice(None), *region)
        acc[cregion] += pred * weight
        wsum[region] += weight
        np.minimum(lo[cregion], pred, out=lo[cregion])
        np.maximum(hi[cregion], pred, out=hi[cregion])

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            for tile, pred in zip(plan.tiles, pool.map(run, plan.tiles)):
                accumulate(tile, pred)
    else:
        for tile in plan.tiles:
            accumulate(tile, run(tile))

    if np.any(wsum <= 0):
        raise AssertionError("zero stitching weight; tile plan does not cover the volume")
    # clamp to the envelope of contributing predictions: rounding in the
    # weighted mean can otherwise step outside it, and voxels covered by one
    # tile (or by identical predictions) then come back bit-exact
    probs = np.clip(acc / wsum, lo, hi)
    b = plan.pad_before
    probs = probs[:, b[0] : b[0] + shape[0], b[1] : b[1] + shape[1], b[2] : b[2] + shape[2]]
    return np.ascontiguousarray(probs.astype(out_dtype))


def _as_mask(labels: np.ndarray, reference: Volume | None) -> MaskVolume:
    if reference is None:
        return MaskVolume(labels.astype(np.uint8))
    return MaskVolume(labels.astype(np.uint8), reference.affine, reference.spacing)


def argmax_mask(probs: np.ndarray, reference: Volume | None = None) -> MaskVolume:
    """Per-voxel channel argmax; ties go to the lowest channel index."""
    probs = np.asarray(probs)
    if probs.ndim != 4 or probs.shape[0] < 2:
        raise ValidationError(f"need (C>=2, X, Y, Z) probabilities, got {probs.shape}")
    # np.argmax returns the first maximal index, which is the tie rule we want
    return _as_mask(np.argmax(probs, axis=0), reference)


def ensemble_vote(
    prob_volumes: Sequence[np.ndarray], reference: Volume | None = None, mode: str = "mean"
) -> MaskVolume:
    """Combine equally weighted models.

    ``mode="mean"`` averages probabilities and takes the argmax;
    ``mode="hard"`` takes a majority vote over per-model argmax labels.
    """
    if not prob_volumes:
        raise ValidationError("ensemble_vote needs at least one probability volume")
    shape = np.shape(prob_volumes[0])
    for p in prob_volumes[1:]:
        if np.shape(p) != shape:
            raise ValidationError(f"probability volume shapes differ: {shape} vs {np.shape(p)}")
    if mode == "mean":
        mean = np.zeros(shape)
        for p in prob_volumes:
            mean += p
        return argmax_mask(mean / len(prob_volumes), reference)
    if mode == "hard":
        votes = np.zeros(shape, dtype=np.int64)
        for p in prob_volumes:
            label = np.argmax(p, axis=0)
            np.put_along_axis(votes, label[None], np.take_along_axis(votes, label[None], 0) + 1, 0)
        return _as_mask(np.argmax(votes, axis=0), reference)
    raise ValidationError(f"unknown vote mode {mode!r}")
