"""DynUNet in numpy: architecture config, shape calculus, initialization,
forward pass and a flat binary params container.

Downsampling uses strided 3x3x3 convolutions, not pooling. Each encoder
level is a residual block (conv-norm-lrelu-conv-norm plus a 1x1x1
projection of its input); each decoder level is a transposed conv whose
kernel equals its stride, a skip concatenation and two conv-norm-lrelu
layers.

Two convolution paths exist. ``impl="reference"`` walks output voxels in
plain loops; ``impl="fast"`` builds strided window views and contracts them
with one tensordot. They must agree to 1e-5 relative.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import FormatError, NiftiIOError, NumericError, ShapeError, ValidationError

Triple = tuple[int, int, int]

DEFAULT_FILTERS = (32, 64, 128, 256, 320, 320)
DEFAULT_STRIDES = ((1, 1, 1), (2, 2, 2), (2, 2, 2), (2, 2, 2), (2, 2, 2), (2, 2, 1))
NORM_EPS = 1e-5


@dataclass(frozen=True)
class ArchSpec:
    in_channels: int = 1
    out_channels: int = 2
    filters: tuple[int, ...] = DEFAULT_FILTERS
    strides: tuple[Triple, ...] = DEFAULT_STRIDES
    kernel: int = 3
    norm: str = "instance"  # "instance" or "none"
    padding_mode: str = "zeros"  # "zeros" or "replicate"
    negative_slope: float = 0.01

    def __post_init__(self):
        filters = tuple(int(f) for f in self.filters)
        strides = tuple(tuple(int(s) for s in st) for st in self.strides)
        object.__setattr__(self, "filters", filters)
        object.__setattr__(self, "strides", strides)
        if len(filters) != len(strides) or len(filters) < 2:
            raise ValidationError("filters and strides need equal length >= 2")
        if min(filters) < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ValidationError("channel counts must be positive")
        for st in strides:
            if len(st) != 3 or any(s not in (1, 2) for s in st):
                raise ValidationError(f"stride components must be 1 or 2, got {st}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValidationError("kernel must be a positive odd integer")
        if self.norm not in ("instance", "none"):
            raise ValidationError(f"unknown norm {self.norm!r}")
        if self.padding_mode not in ("zeros", "replicate"):
            raise ValidationError(f"unknown padding_mode {self.padding_mode!r}")

    @property
    def depth(self) -> int:
        return len(self.filters)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["filters"] = list(self.filters)
        d["strides"] = [list(s) for s in self.strides]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown arch keys: {sorted(unknown)}")
        d = dict(d)
        if "strides" in d:
            d["strides"] = tuple(tuple(s) for s in d["strides"])
        if "filters" in d:
            d["filters"] = tuple(d["filters"])
        return cls(**d)


def toy_arch(**overrides) -> ArchSpec:
    """Two-level network small enough for loop-based checks."""
    base = dict(filters=(4, 8), strides=((1, 1, 1), (2, 2, 2)))
    base.update(overrides)
    return ArchSpec(**base)


@dataclass(frozen=True)
class LevelShape:
    channels: int
    spatial: Triple


@dataclass(frozen=True)
class ShapePlan:
    encoder: tuple[LevelShape, ...]
    decoder: tuple[LevelShape, ...]
    output: LevelShape

    @property
    def bottleneck(self) -> Triple:
        return self.encoder[-1].spatial


def total_stride(arch: ArchSpec) -> Triple:
    return tuple(int(np.prod([st[a] for st in arch.strides])) for a in range(3))


def shape_plan(arch: ArchSpec, input_shape) -> ShapePlan:
    """Per-level channel counts and spatial shapes for a given input size."""
    input_shape = tuple(int(v) for v in input_shape)
    if len(input_shape) != 3:
        raise ShapeError(f"input shape must have 3 spatial axes, got {input_shape}")
    divisor = total_stride(arch)
    for axis, (n, d) in enumerate(zip(input_shape, divisor)):
        if n < 1 or n % d:
            raise ShapeError(
                f"input size {n} on axis {'xyz'[axis]} is not divisible by {d} "
                f"(product of strides on that axis)"
            )
    enc = []
    cur = np.array(input_shape)
    for f, st in zip(arch.filters, arch.strides):
        cur = cur // np.array(st)
        enc.append(LevelShape(f, tuple(int(v) for v in cur)))
    dec = [LevelShape(enc[l - 1].channels, enc[l - 1].spatial) for l in range(arch.depth - 1, 0, -1)]
    return ShapePlan(tuple(enc), tuple(dec), LevelShape(arch.out_channels, input_shape))


# ----------------------------------------------------------------- params


class ModelParams(dict):
    """Mapping of tensor name to float array, tagged with its :class:`ArchSpec`."""

    def __init__(self, arch: ArchSpec, tensors=()):
        super().__init__(tensors)
        self.arch = arch


def param_shapes(arch: ArchSpec) -> dict[str, tuple[int, ...]]:
    k = (arch.kernel,) * 3
    shapes: dict[str, tuple[int, ...]] = {}

    def block(prefix, cin, cout, residual):
        shapes[f"{prefix}.conv1.weight"] = (cout, cin, *k)
        shapes[f"{prefix}.conv1.bias"] = (cout,)
        shapes[f"{prefix}.norm1.weight"] = (cout,)
        shapes[f"{prefix}.norm1.bias"] = (cout,)
        shapes[f"{prefix}.conv2.weight"] = (cout, cout, *k)
        shapes[f"{prefix}.conv2.bias"] = (cout,)
        shapes[f"{prefix}.norm2.weight"] = (cout,)
        shapes[f"{prefix}.norm2.bias"] = (cout,)
        if residual:
            shapes[f"{prefix}.res.weight"] = (cout, cin, 1, 1, 1)
            shapes[f"{prefix}.res.bias"] = (cout,)
            shapes[f"{prefix}.norm3.weight"] = (cout,)
            shapes[f"{prefix}.norm3.bias"] = (cout,)

    cin = arch.in_channels
    for l, f in enumerate(arch.filters):
        block(f"enc{l}", cin, f, residual=True)
        cin = f
    for l in range(arch.depth - 1, 0, -1):
        up_in, up_out = arch.filters[l], arch.filters[l - 1]
        shapes[f"dec{l}.up.weight"] = (up_in, up_out, *arch.strides[l])
        shapes[f"dec{l}.up.bias"] = (up_out,)
        block(f"dec{l}", 2 * up_out, up_out, residual=False)
    shapes["out.weight"] = (arch.out_channels, arch.filters[0], 1, 1, 1)
    shapes["out.bias"] = (arch.out_channels,)
    return shapes


def init_params(arch: ArchSpec, seed: int = 0) -> ModelParams:
    """Kaiming-normal conv kernels (fan-in), zero biases, unit norm scales."""
    rng = np.random.default_rng(seed)
    params = ModelParams(arch)
    for name, shape in param_shapes(arch).items():
        if name.endswith(".weight") and len(shape) == 5:
            if ".up." in name:
                fan_in = shape[0] * int(np.prod(shape[2:]))
            else:
                fan_in = shape[1] * int(np.prod(shape[2:]))
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif ".norm" in name and name.endswith(".weight"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return params


def check_params(params: ModelParams) -> None:
    expected = param_shapes(params.arch)
    missing = set(expected) - set(params)
    extra = set(params) - set(expected)
    if missing or extra:
        raise ShapeError(f"params do not match arch (missing {sorted(missing)}, extra {sorted(extra)})")
    for name, shape in expected.items():
        arr = np.asarray(params[name])
        if arr.shape != shape:
            raise ShapeError(f"{name}: expected shape {shape}, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"{name} contains non-finite values")


_MAGIC = b"VWPARAMS"


def save_params(params: ModelParams, path) -> None:
    """Write ``magic | u64 index length | JSON index | little-endian float32 data``."""
    check_params(params)
    index, chunks, offset = {}, [], 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        index[name] = {"shape": list(arr.shape), "offset": offset}
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    head = json.dumps({"arch": params.arch.to_dict(), "tensors": index}, sort_keys=True).encode()
    try:
        with open(path, "wb") as fh:
            fh.write(_MAGIC + struct.pack("<Q", len(head)) + head)
            for c in chunks:
                fh.write(c)
    except OSError as exc:
        raise NiftiIOError(f"cannot write params to {path}: {exc}") from exc


def load_params(path) -> ModelParams:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise NiftiIOError(f"cannot read params from {path}: {exc}") from exc
    if raw[:8] != _MAGIC or len(raw) < 16:
        raise FormatError(f"{path}: not a volwindow params file")
    (n,) = struct.unpack("<Q", raw[8:16])
    try:
        meta = json.loads(raw[16 : 16 + n])
    except ValueError as exc:
        raise FormatError(f"{path}: corrupt params index") from exc
    base = 16 + n
    params = ModelParams(ArchSpec.from_dict(meta["arch"]))
    for name, entry in meta["tensors"].items():
        count = int(np.prod(entry["shape"]))
        start = base + entry["offset"]
        if start + 4 * count > len(raw):
            raise NiftiIOError(f"{path}: tensor {name} truncated")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=start)
        params[name] = arr.reshape(entry["shape"]).astype(np.float64)
    check_params(params)
    return params


# ----------------------------------------------------------------- kernels


def _pad(x: np.ndarray, p: int, mode: str) -> np.ndarray:
    if p == 0:
        return x
    width = ((0, 0), (p, p), (p, p), (p, p))
    return np.pad(x, width, mode="edge" if mode == "replicate" else "constant")


def conv3d_fast(x, w, b, stride, padding_mode="zeros"):
    """``x`` (Cin, X, Y, Z), ``w`` (Cout, Cin, k, k, k) -> (Cout, X', Y', Z')."""
    k = w.shape[2]
    xp = _pad(x, k // 2, padding_mode)
    win = sliding_window_view(xp, w.shape[2:], axis=(1, 2, 3))
    win = win[:, :: stride[0], :: stride[1], :: stride[2]]
    out = np.tensordot(w, win, axes=([1, 2, 3, 4], [0, 4, 5, 6]))
    return out + b[:, None, None, None]


def conv3d_reference(x, w, b, stride, padding_mode="zeros"):
    k = w.shape[2]
    xp = _pad(x, k // 2, padding_mode)
    cout = w.shape[0]
    out_shape = [(xp.shape[a + 1] - k) // stride[a] + 1 for a in range(3)]
    out = np.empty((cout, *out_shape))
    wflat = w.reshape(cout, -1)
    for i in range(out_shape[0]):
        xi = i * stride[0]
        for j in range(out_shape[1]):
            yj = j * stride[1]
            for m in range(out_shape[2]):
                zm = m * stride[2]
                patch = xp[:, xi : xi + k, yj : yj + k, zm : zm + k].reshape(-1)
                out[:, i, j, m] = wflat @ patch + b
    return out


def conv_transpose3d_fast(x, w, b, stride):
    """Transposed conv with kernel == stride; ``w`` is (Cin, Cout, sx, sy, sz)."""
    cin, X, Y, Z = x.shape
    cout = w.shape[1]
    sx, sy, sz = stride
    out = np.einsum("ixyz,ioabc->oxaybzc", x, w, optimize=True)
    out = out.reshape(cout, X * sx, Y * sy, Z * sz)
    return out + b[:, None, None, None]


def conv_transpose3d_reference(x, w, b, stride):
    cin, X, Y, Z = x.shape
    cout = w.shape[1]
    sx, sy, sz = stride
    out = np.zeros((cout, X * sx, Y * sy, Z * sz))
    for i in range(X):
        for j in range(Y):
            for m in range(Z):
                contrib = np.tensordot(x[:, i, j, m], w, axes=(0, 0))
                out[:, i * sx : (i + 1) * sx, j * sy : (j + 1) * sy, m * sz : (m + 1) * sz] += contrib
    return out + b[:, None, None, None]


def instance_norm(x, scale, shift, eps=NORM_EPS):
    """Per-channel spatial normalization, rescaled internally so huge finite inputs stay finite."""
    out = np.empty_like(x)
    for c in range(x.shape[0]):
        v = x[c]
        m = np.max(np.abs(v))
        if m == 0 or not np.isfinite(m):
            if not np.isfinite(m):
                raise NumericError("non-finite activation in instance norm")
            out[c] = shift[c]
            continue
        u = v / m
        centered = u - u.mean()
        denom = np.sqrt(np.mean(centered * centered) + eps / (m * m))
        out[c] = (centered / denom if denom > 0 else 0.0) * scale[c] + shift[c]
    return out


def leaky_relu(x, slope):
    return np.where(x >= 0, x, slope * x)


def softmax_channels(logits: np.ndarray) -> np.ndarray:
    """Softmax over axis 0, stabilized by subtracting the per-voxel max."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


# ----------------------------------------------------------------- forward


class _Ops:
    def __init__(self, arch: ArchSpec, impl: str):
        if impl not in ("fast", "reference"):
            raise ValidationError(f"unknown impl {impl!r}")
        self.arch = arch
        self.conv = conv3d_fast if impl == "fast" else conv3d_reference
        self.up = conv_transpose3d_fast if impl == "fast" else conv_transpose3d_reference

    def norm(self, x, p, name):
        if self.arch.norm == "none":
            return x
        return instance_norm(x, p[f"{name}.weight"], p[f"{name}.bias"])

    def act(self, x):
        return leaky_relu(x, self.arch.negative_slope)

    def conv_norm(self, x, p, prefix, conv, norm, stride):
        y = self.conv(x, p[f"{prefix}.{conv}.weight"], p[f"{prefix}.{conv}.bias"], stride, self.arch.padding_mode)
        return self.norm(y, p, f"{prefix}.{norm}")


def _res_block(ops: _Ops, x, p, prefix, stride):
    y = ops.act(ops.conv_norm(x, p, prefix, "conv1", "norm1", stride))
    y = ops.conv_norm(y, p, prefix, "conv2", "norm2", (1, 1, 1))
    r = ops.conv_norm(x, p, prefix, "res", "norm3", stride)
    return ops.act(y + r)


def _basic_block(ops: _Ops, x, p, prefix):
    y = ops.act(ops.conv_norm(x, p, prefix, "conv1", "norm1", (1, 1, 1)))
    return ops.act(ops.conv_norm(y, p, prefix, "conv2", "norm2", (1, 1, 1)))


def forward(params: ModelParams, patch: np.ndarray, impl: str = "fast") -> np.ndarray:
    """Logits ``(out_channels, X, Y, Z)`` for a ``(in_channels, X, Y, Z)`` patch."""
    arch = params.arch
    check_params(params)
    x = np.asarray(patch, dtype=np.float64)
    if x.ndim != 4 or x.shape[0] != arch.in_channels:
        raise ShapeError(f"patch must be ({arch.in_channels}, X, Y, Z), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericError("patch contains non-finite values")
    shape_plan(arch, x.shape[1:])

    ops = _Ops(arch, impl)
    skips = []
    for l, st in enumerate(arch.strides):
        x = _res_block(ops, x, params, f"enc{l}", st)
        skips.append(x)
    for l in range(arch.depth - 1, 0, -1):
        x = ops.up(x, params[f"dec{l}.up.weight"], params[f"dec{l}.up.bias"], arch.strides[l])
        x = np.concatenate([x, skips[l - 1]], axis=0)
        x = _basic_block(ops, x, params, f"dec{l}")
    w, b = params["out.weight"], params["out.bias"]
    out = np.tensordot(w[:, :, 0, 0, 0], x, axes=(1, 0)) + b[:, None, None, None]
    if not np.all(np.isfinite(out)):
        raise NumericError("forward produced non-finite logits")
    return out


@dataclass
class DynUNetPredictor:
    """Patch predictor: ``(in_channels, *roi)`` patch -> float32 softmax probabilities."""

    params: ModelParams
    impl: str = "fast"

    def __call__(self, patch: np.ndarray) -> np.ndarray:
        return softmax_channels(forward(self.params, patch, self.impl)).astype(np.float32)


PatchPredictor = Callable[[np.ndarray], np.ndarray]
