"""Pipeline configuration: YAML file, built-in defaults, flag overrides.

Precedence is command-line flag > config file > default. Key names match
the dataclass fields exactly; unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .augment import CropConfig
from .dynunet import ArchSpec
from .errors import NiftiIOError, ValidationError
from .preprocess import PreprocessConfig
from .swinfer import BlendMode

_NESTED = {
    "preprocess": PreprocessConfig,
    "crop": CropConfig,
    "blend": BlendMode,
}


@dataclass(frozen=True)
class PipelineConfig:
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    crop: CropConfig = field(default_factory=CropConfig)
    arch: ArchSpec = field(default_factory=ArchSpec)
    roi: tuple[int, int, int] = (128, 128, 128)
    overlap: float = 0.75
    blend: BlendMode = field(default_factory=BlendMode)
    model_paths: tuple[str, ...] = ()
    connectivity: int = 26
    seed: int = 0

    def __post_init__(self):
        roi = tuple(int(v) for v in self.roi)
        if len(roi) != 3 or min(roi) < 1:
            raise ValidationError(f"roi must be 3 positive integers, got {self.roi}")
        object.__setattr__(self, "roi", roi)
        object.__setattr__(self, "model_paths", tuple(str(p) for p in self.model_paths))
        if not 0.0 <= float(self.overlap) < 1.0:
            raise ValidationError(f"overlap must lie in [0, 1), got {self.overlap}")
        if self.connectivity not in (6, 18, 26):
            raise ValidationError(f"connectivity must be 6, 18 or 26, got {self.connectivity}")

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, ArchSpec):
                value = value.to_dict()
            elif dataclasses.is_dataclass(value):
                value = {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(value).items()}
            elif isinstance(value, tuple):
                value = list(value)
            out[f.name] = value
        return out


def _build_nested(name: str, value):
    if not isinstance(value, dict):
        raise ValidationError(f"config section {name!r} must be a mapping")
    if name == "arch":
        return ArchSpec.from_dict(value)
    cls = _NESTED[name]
    unknown = set(value) - {f.name for f in dataclasses.fields(cls)}
    if unknown:
        raise ValidationError(f"unknown keys in {name!r}: {sorted(unknown)}")
    return cls(**value)


def config_from_dict(data: dict, base: PipelineConfig | None = None) -> PipelineConfig:
    """Overlay ``data`` on ``base`` (defaults when omitted); nested sections merge per key."""
    base = base or PipelineConfig()
    if not isinstance(data, dict):
        raise ValidationError("config root must be a mapping")
    known = {f.name for f in dataclasses.fields(PipelineConfig)}
    unknown = set(data) - known
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    merged = base.to_dict()
    for key, value in data.items():
        if key in _NESTED or key == "arch":
            if not isinstance(value, dict):
                raise ValidationError(f"config section {key!r} must be a mapping")
            merged[key] = {**merged[key], **value}
        else:
            merged[key] = value
    kwargs = {k: _build_nested(k, v) if (k in _NESTED or k == "arch") else v for k, v in merged.items()}
    try:
        return PipelineConfig(**kwargs)
    except TypeError as exc:
        raise ValidationError(f"bad config value: {exc}") from exc


def load_config(path) -> PipelineConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise NiftiIOError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ValidationError(f"config {path} is not valid YAML: {exc}") from exc
    return config_from_dict(data)


def apply_overrides(cfg: PipelineConfig, overrides: dict) -> PipelineConfig:
    """Apply dotted-key overrides such as ``{"preprocess.clip": False}``; ``None`` values are skipped."""
    nested: dict = {}
    for key, value in overrides.items():
        if value is None:
            continue
        head, _, tail = key.partition(".")
        if tail:
            nested.setdefault(head, {})[tail] = value
        else:
            nested[head] = value
    return config_from_dict(nested, cfg) if nested else cfg
