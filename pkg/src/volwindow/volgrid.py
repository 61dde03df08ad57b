"""Geometry-aware 3D grids and a small NIfTI-1 codec.

Arrays are indexed ``[x, y, z]``. On disk NIfTI stores x fastest, which is
Fortran order for an ``[x, y, z]`` array, so the codec reads and writes with
``order="F"`` and never transposes.
"""
from __future__ import annotations

import gzip
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from .errors import (
    DimensionalityError,
    FormatError,
    GeometryError,
    NiftiIOError,
    ValidationError,
)

log = logging.getLogger(__name__)

SPACING_RTOL = 1e-4

HEADER_SIZE = 348
VOX_OFFSET = 352

# NIfTI datatype code -> numpy dtype (little-endian form; byte order fixed on read)
DATATYPES = {
    2: np.dtype("u1"),
    4: np.dtype("<i2"),
    8: np.dtype("<i4"),
    16: np.dtype("<f4"),
    64: np.dtype("<f8"),
}

HEADER_DTYPE = np.dtype(
    [
        ("sizeof_hdr", "i4"),
        ("data_type", "S10"),
        ("db_name", "S18"),
        ("extents", "i4"),
        ("session_error", "i2"),
        ("regular", "S1"),
        ("dim_info", "u1"),
        ("dim", "i2", (8,)),
        ("intent_p1", "f4"),
        ("intent_p2", "f4"),
        ("intent_p3", "f4"),
        ("intent_code", "i2"),
        ("datatype", "i2"),
        ("bitpix", "i2"),
        ("slice_start", "i2"),
        ("pixdim", "f4", (8,)),
        ("vox_offset", "f4"),
        ("scl_slope", "f4"),
        ("scl_inter", "f4"),
        ("slice_end", "i2"),
        ("slice_code", "u1"),
        ("xyzt_units", "u1"),
        ("cal_max", "f4"),
        ("cal_min", "f4"),
        ("slice_duration", "f4"),
        ("toffset", "f4"),
        ("glmax", "i4"),
        ("glmin", "i4"),
        ("descrip", "S80"),
        ("aux_file", "S24"),
        ("qform_code", "i2"),
        ("sform_code", "i2"),
        ("quatern_b", "f4"),
        ("quatern_c", "f4"),
        ("quatern_d", "f4"),
        ("qoffset_x", "f4"),
        ("qoffset_y", "f4"),
        ("qoffset_z", "f4"),
        ("srow_x", "f4", (4,)),
        ("srow_y", "f4", (4,)),
        ("srow_z", "f4", (4,)),
        ("intent_name", "S16"),
        ("magic", "S4"),
    ]
)
assert HEADER_DTYPE.itemsize == HEADER_SIZE


def orientation_code(affine: np.ndarray) -> str:
    """Anatomical code ("RAS", "LPS", ...) of the voxel axes of ``affine``.

    Each voxel axis is matched to the world axis it is most aligned with,
    greedily by largest absolute direction cosine.
    """
    rot = np.asarray(affine, dtype=np.float64)[:3, :3]
    norms = np.linalg.norm(rot, axis=0)
    if np.any(norms == 0) or abs(np.linalg.det(rot)) < 1e-12 * np.prod(norms):
        raise GeometryError("affine is singular; cannot infer orientation")
    cos = np.abs(rot / norms)
    letters = [("L", "R"), ("P", "A"), ("I", "S")]
    code = [""] * 3
    used_world, used_vox = set(), set()
    for flat in np.argsort(-cos, axis=None):
        w, v = divmod(int(flat), 3)
        if w in used_world or v in used_vox:
            continue
        used_world.add(w)
        used_vox.add(v)
        code[v] = letters[w][int(rot[w, v] > 0)]
    return "".join(code)


def _check_geometry(shape: tuple, spacing: tuple, affine: np.ndarray) -> None:
    if len(shape) != 3 or any(int(s) < 1 for s in shape):
        raise ValidationError(f"shape must be 3 positive integers, got {shape}")
    sp = np.asarray(spacing, dtype=np.float64)
    if sp.shape != (3,) or not np.all(np.isfinite(sp)) or np.any(sp <= 0):
        raise ValidationError(f"spacing must be 3 positive finite reals, got {spacing}")
    if affine.shape != (4, 4) or not np.all(np.isfinite(affine)):
        raise GeometryError("affine must be a finite 4x4 matrix")
    cols = np.linalg.norm(affine[:3, :3], axis=0)
    if not np.allclose(cols, sp, rtol=SPACING_RTOL, atol=0):
        raise GeometryError(
            f"spacing {tuple(sp)} inconsistent with affine column norms {tuple(cols)}"
        )


@dataclass(frozen=True)
class Volume:
    """Dense scalar 3D image with its voxel-to-world affine (mm)."""

    data: np.ndarray
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))
    spacing: tuple[float, float, float] | None = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        affine = np.array(self.affine, dtype=np.float64)
        spacing = self.spacing
        if spacing is None:
            spacing = tuple(float(v) for v in np.linalg.norm(affine[:3, :3], axis=0))
        spacing = tuple(float(s) for s in spacing)
        if data.ndim != 3:
            raise DimensionalityError(f"expected a 3D array, got {data.ndim}D")
        _check_geometry(data.shape, spacing, affine)
        data.setflags(write=False)
        affine.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "affine", affine)
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(int(s) for s in self.data.shape)

    @property
    def orientation_code(self) -> str:
        return orientation_code(self.affine)

    def with_data(self, data: np.ndarray) -> "Volume":
        """Same geometry, new voxel values."""
        return type(self)(data, self.affine, self.spacing)


@dataclass(frozen=True)
class MaskVolume(Volume):
    """Integer label grid; 0 is background, 1 is lesion."""

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.size and (
            not np.all(np.isfinite(raw)) or np.any(raw < 0) or np.any(raw != np.round(raw))
        ):
            raise ValidationError("mask values must be non-negative integers")
        if raw.size and raw.max() > 255:
            raise ValidationError("mask values must fit in uint8")
        super().__post_init__()
        data = raw.astype(np.uint8)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def is_binary(self) -> bool:
        return bool(np.all(self.data <= 1))


Grid = Union[Volume, MaskVolume]


def voxel_volume_ml(spacing) -> float:
    """Volume of one voxel in millilitres, for spacing given in mm."""
    sp = np.asarray(spacing, dtype=np.float64)
    if sp.shape != (3,) or not np.all(np.isfinite(sp)) or np.any(sp <= 0):
        raise ValidationError(f"spacing must be 3 positive reals, got {spacing}")
    return float(sp[0] * sp[1] * sp[2] / 1000.0)


def _quaternion_affine(hdr: np.ndarray) -> np.ndarray:
    b, c, d = (float(hdr[k]) for k in ("quatern_b", "quatern_c", "quatern_d"))
    a = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(a) if a > 1e-7 else 0.0
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ]
    )
    pixdim = hdr["pixdim"].astype(np.float64)
    qfac = -1.0 if pixdim[0] < 0 else 1.0
    scale = np.array([pixdim[1], pixdim[2], pixdim[3] * qfac])
    out = np.eye(4)
    out[:3, :3] = rot * scale
    out[:3, 3] = [hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"]]
    return out


def _open_bytes(path: Path) -> bytes:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise NiftiIOError(f"cannot read {path}: {exc}") from exc
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise NiftiIOError(f"corrupt gzip stream in {path}: {exc}") from exc
    return raw


def read_nifti(path, mask: bool = False) -> Grid:
    """Load a single-file NIfTI-1 image (``.nii`` or ``.nii.gz``).

    Returns a :class:`MaskVolume` when ``mask`` is true, else a
    :class:`Volume`. The affine comes from the sform when its code is set,
    then the qform, then ``diag(pixdim)`` with a warning.
    """
    path = Path(path)
    raw = _open_bytes(path)
    if len(raw) < HEADER_SIZE:
        raise NiftiIOError(f"{path}: file shorter than a NIfTI-1 header")
    hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=HEADER_DTYPE.newbyteorder("<"))[0]
    endian = "<"
    if int(hdr["sizeof_hdr"]) != HEADER_SIZE:
        hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=HEADER_DTYPE.newbyteorder(">"))[0]
        endian = ">"
        if int(hdr["sizeof_hdr"]) != HEADER_SIZE:
            raise FormatError(f"{path}: sizeof_hdr is not 348; not NIfTI-1")
    magic = bytes(raw[344:348])
    if magic != b"n+1\x00":
        if magic == b"ni1\x00":
            raise FormatError(f"{path}: two-file NIfTI (.hdr/.img) is not supported")
        raise FormatError(f"{path}: missing NIfTI-1 magic 'n+1'; got {magic!r}")

    dim = [int(v) for v in hdr["dim"]]
    if dim[0] != 3:
        raise DimensionalityError(f"{path}: expected 3 dimensions, header has dim[0]={dim[0]}")
    shape = tuple(dim[1:4])
    if any(s < 1 for s in shape):
        raise DimensionalityError(f"{path}: non-positive dimension in {shape}")

    code = int(hdr["datatype"])
    if code not in DATATYPES:
        raise FormatError(f"{path}: unsupported NIfTI datatype code {code}")
    dtype = DATATYPES[code].newbyteorder(endian)

    offset = int(hdr["vox_offset"])
    nbytes = int(np.prod(shape)) * dtype.itemsize
    if offset < HEADER_SIZE or len(raw) < offset + nbytes:
        raise NiftiIOError(
            f"{path}: data section truncated (need {nbytes} bytes at offset {offset}, "
            f"file has {len(raw)})"
        )
    arr = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=offset)
    arr = arr.reshape(shape, order="F")

    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if np.isfinite(slope) and slope != 0 and (slope != 1 or inter != 0):
        data = arr.astype(np.float64) * slope + inter
    else:
        data = arr

    pixdim = hdr["pixdim"].astype(np.float64)
    spacing = np.abs(pixdim[1:4])
    if int(hdr["sform_code"]) > 0:
        affine = np.eye(4)
        affine[0], affine[1], affine[2] = hdr["srow_x"], hdr["srow_y"], hdr["srow_z"]
    elif int(hdr["qform_code"]) > 0:
        affine = _quaternion_affine(hdr)
    else:
        log.warning("%s: sform_code and qform_code are both 0; using diag(pixdim)", path)
        affine = np.diag([*spacing, 1.0])

    cols = np.linalg.norm(affine[:3, :3], axis=0)
    if not np.allclose(cols, spacing, rtol=SPACING_RTOL, atol=0):
        log.warning("%s: pixdim %s disagrees with affine; spacing taken from affine", path, spacing)
        spacing = cols

    cls = MaskVolume if mask else Volume
    if mask:
        data = np.rint(np.asarray(data, dtype=np.float64))
    return cls(np.array(data, copy=True), affine, tuple(spacing))


def write_nifti(volume: Grid, path, binary: bool = True) -> None:
    """Write ``volume`` as single-file NIfTI-1; gzip when the name ends in ``.gz``.

    Volumes are stored as float32 and masks as uint8. With ``binary`` set, a
    mask holding any value other than 0/1 is rejected.
    """
    path = Path(path)
    is_mask = isinstance(volume, MaskVolume)
    if is_mask and binary and not volume.is_binary:
        raise ValidationError("binary mask contains values other than 0 and 1")
    _check_geometry(volume.shape, volume.spacing, volume.affine)

    hdr = np.zeros((), dtype=HEADER_DTYPE.newbyteorder("<"))
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["dim"] = [3, *volume.shape, 1, 1, 1, 1]
    hdr["datatype"] = 2 if is_mask else 16
    hdr["bitpix"] = 8 if is_mask else 32
    hdr["pixdim"] = [1.0, *volume.spacing, 1.0, 1.0, 1.0, 1.0]
    hdr["vox_offset"] = VOX_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["xyzt_units"] = 2  # mm
    hdr["sform_code"] = 1
    hdr["srow_x"], hdr["srow_y"], hdr["srow_z"] = volume.affine[:3]
    hdr["magic"] = b"n+1"

    dtype = np.dtype("u1") if is_mask else np.dtype("<f4")
    payload = np.asarray(volume.data, dtype=dtype).tobytes(order="F")
    blob = hdr.tobytes() + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + payload
    if path.name.endswith(".gz"):
        blob = gzip.compress(blob, mtime=0)
    try:
        path.write_bytes(blob)
    except OSError as exc:
        raise NiftiIOError(f"cannot write {path}: {exc}") from exc
