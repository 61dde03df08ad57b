"""Seeded training-time sampling: class-balanced crops, flips and 90-degree rotations."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ValidationError
from .volgrid import MaskVolume, Volume

# (i, j) plane -> np.rot90 ``axes`` argument giving (i, j) -> (j, n_i - 1 - i)
ROTATION_PLANES = {"xy": (1, 0), "yz": (2, 1), "xz": (2, 0)}


@dataclass(frozen=True)
class CropConfig:
    crop_size: tuple[int, int, int] = (224, 224, 224)
    pos_ratio: float = 0.6
    seed: int = 0

    def __post_init__(self):
        size = tuple(int(v) for v in self.crop_size)
        if len(size) != 3 or min(size) < 1:
            raise ValidationError(f"crop_size must be 3 integers >= 1, got {self.crop_size}")
        object.__setattr__(self, "crop_size", size)
        if not 0.0 <= float(self.pos_ratio) <= 1.0:
            raise ValidationError(f"pos_ratio must lie in [0, 1], got {self.pos_ratio}")


@dataclass(frozen=True)
class CropSample:
    image: Volume
    label: MaskVolume
    center: tuple[int, int, int]
    center_class: str
    fallback: bool


def make_rng(seed: int, case_id: int = 0) -> np.random.Generator:
    """Counter-based (Philox) stream keyed by ``(seed, case_id)``.

    Different case ids give independent substreams, so per-case augmentation
    does not depend on the order cases are processed in.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed) & (2**64 - 1), int(case_id)])))


def _window(center: int, dim: int, size: int) -> int:
    """Start index of a ``size`` window around ``center`` along an axis of length ``dim``."""
    if dim >= size:
        return min(max(center - size // 2, 0), dim - size)
    return -((size - dim) // 2)


def extract_window(data: np.ndarray, start, size) -> np.ndarray:
    """Copy ``data[start:start+size]`` with zero fill outside the array."""
    out = np.zeros(tuple(size), dtype=data.dtype)
    src, dst = [], []
    for s, n, dim in zip(start, size, data.shape):
        lo, hi = max(s, 0), min(s + n, dim)
        src.append(slice(lo, hi))
        dst.append(slice(lo - s, hi - s))
    out[tuple(dst)] = data[tuple(src)]
    return out


def sample_balanced_crop(
    image: Volume, label: MaskVolume, cfg: CropConfig, rng: np.random.Generator
) -> CropSample:
    """Draw one crop whose center voxel is lesion with probability ``pos_ratio``.

    The center is clamped so the window stays inside the volume; an axis
    shorter than the crop is zero-padded symmetrically instead.
    """
    if image.shape != label.shape:
        raise ShapeError(f"image shape {image.shape} != label shape {label.shape}")
    if np.prod(image.shape) == 0:
        raise ValidationError("empty volume")
    if not label.is_binary:
        raise ValidationError("label must be binary")

    flat = label.data.ravel(order="F")
    want_pos = bool(rng.random() < cfg.pos_ratio)
    pool = np.flatnonzero(flat if want_pos else flat == 0)
    fallback = False
    if pool.size == 0:
        fallback = True
        want_pos = not want_pos
        pool = np.flatnonzero(flat if want_pos else flat == 0)
    idx = int(pool[rng.integers(pool.size)])
    voxel = np.unravel_index(idx, image.shape, order="F")

    size = cfg.crop_size
    start = [_window(int(c), d, n) for c, d, n in zip(voxel, image.shape, size)]
    center = tuple(int(s + n // 2) for s, n in zip(start, size))

    affine = np.array(image.affine, dtype=np.float64)
    affine[:3, 3] = affine[:3, :3] @ np.asarray(start, dtype=np.float64) + affine[:3, 3]
    img = Volume(extract_window(image.data, start, size), affine, image.spacing)
    lab = MaskVolume(extract_window(label.data, start, size), affine, label.spacing)
    return CropSample(img, lab, center, "pos" if want_pos else "neg", fallback)


def random_flip(image: np.ndarray, label: np.ndarray, p: float, rng: np.random.Generator):
    """Flip image and label together along each axis independently with probability ``p``.

    Returns ``(image, label, flips)`` where ``flips`` holds one bool per axis.
    """
    if image.shape != label.shape:
        raise ShapeError(f"image shape {image.shape} != label shape {label.shape}")
    flips = tuple(bool(v) for v in rng.random(3) < p)
    axes = tuple(a for a in range(3) if flips[a])
    if axes:
        image = np.flip(image, axis=axes)
        label = np.flip(label, axis=axes)
    return np.ascontiguousarray(image), np.ascontiguousarray(label), flips


def rot90_plane(arr: np.ndarray, plane: str, k: int = 1) -> np.ndarray:
    return np.rot90(arr, k, axes=ROTATION_PLANES[plane])


def random_rot90(image: np.ndarray, label: np.ndarray, p: float, rng: np.random.Generator):
    """Rotate by +90 degrees in each of the xy, yz and xz planes with probability ``p``.

    Rotation maps in-plane index ``(i, j)`` to ``(j, n_i - 1 - i)``; both
    in-plane axes must have equal length when a rotation fires.
    """
    if image.shape != label.shape:
        raise ShapeError(f"image shape {image.shape} != label shape {label.shape}")
    fired = tuple(bool(v) for v in rng.random(3) < p)
    for plane, go in zip(ROTATION_PLANES, fired):
        if not go:
            continue
        a, b = ROTATION_PLANES[plane]
        if image.shape[a] != image.shape[b]:
            raise ShapeError(
                f"cannot rotate in plane {plane}: axis lengths {image.shape[b]} and {image.shape[a]} differ"
            )
        image = rot90_plane(image, plane)
        label = rot90_plane(label, plane)
    return np.ascontiguousarray(image), np.ascontiguousarray(label), dict(zip(ROTATION_PLANES, fired))
