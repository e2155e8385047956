"""Flat key=value configuration with section prefixes.

A config file is plain text, one "section.key = value" per line, '#'
comments. Sections map to the parameter dataclasses of the pipeline
stages; keys are their field names and values are parsed from the field
types. Unknown sections or keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .fusion import FusionParams
from .sampler import SamplingCriteria
from .sgm import DepthParams


@dataclass(frozen=True)
class EvalParams:
    """Evaluation-protocol constants."""

    depth_cap: float = 300.0
    cloud_voxel: float = 0.01
    outlier_neighbors: int = 100
    outlier_std_ratio: float = 1.0

    def __post_init__(self) -> None:
        if self.depth_cap <= 0 or self.cloud_voxel <= 0:
            raise ConfigError("depth cap and voxel size must be positive")
        if self.outlier_neighbors < 1 or self.outlier_std_ratio <= 0:
            raise ConfigError("invalid outlier-removal parameters")


@dataclass(frozen=True)
class PipelineParams:
    """Orchestration constants."""

    bundle_size: int = 5
    queue_capacity: int = 4

    def __post_init__(self) -> None:
        if self.bundle_size < 3 or self.bundle_size % 2 == 0:
            raise ConfigError("bundle size must be odd and at least 3")
        if self.queue_capacity < 1:
            raise ConfigError("queue capacity must be at least 1")


@dataclass(frozen=True)
class PipelineConfig:
    sampling: SamplingCriteria = field(default_factory=SamplingCriteria)
    depth: DepthParams = field(default_factory=DepthParams)
    fusion: FusionParams = field(default_factory=FusionParams)
    eval: EvalParams = field(default_factory=EvalParams)
    pipeline: PipelineParams = field(default_factory=PipelineParams)


_SECTIONS = {
    "sampling": SamplingCriteria,
    "depth": DepthParams,
    "fusion": FusionParams,
    "eval": EvalParams,
    "pipeline": PipelineParams,
}


def _parse_bool(text: str) -> bool:
    t = text.lower()
    if t in ("true", "yes", "on", "1"):
        return True
    if t in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_optional_float(text: str) -> float | None:
    if text.lower() in ("none", ""):
        return None
    return float(text)


def _parse_int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(",") if p.strip())


_CONVERTERS = {
    "float": float,
    "int": int,
    "bool": _parse_bool,
    "str": str,
    "float | None": _parse_optional_float,
    "Optional[float]": _parse_optional_float,
    "tuple[int, ...]": _parse_int_tuple,
}


def _field_converter(fld: dataclasses.Field):
    if isinstance(fld.type, str):
        names = [fld.type]
    else:
        names = [str(fld.type), getattr(fld.type, "__name__", "")]
    for name in names:
        conv = _CONVERTERS.get(name)
        if conv is not None:
            return conv
    raise ConfigError(f"field {fld.name} has unsupported type {names[0]}")


def parse_config_text(text: str, source: str = "<config>") -> PipelineConfig:
    overrides: dict[str, dict[str, object]] = {name: {} for name in _SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if "." not in key:
            raise ConfigError(
                f"{source}:{lineno}: key {key!r} lacks a section prefix")
        section, name = key.split(".", 1)
        cls = _SECTIONS.get(section)
        if cls is None:
            raise ConfigError(f"{source}:{lineno}: unknown section {section!r}")
        flds = {f.name: f for f in dataclasses.fields(cls)}
        if name not in flds:
            raise ConfigError(
                f"{source}:{lineno}: unknown key {name!r} in section {section!r}")
        try:
            overrides[section][name] = _field_converter(flds[name])(value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}")
    try:
        parts = {name: cls(**overrides[name]) for name, cls in _SECTIONS.items()}
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}")
    return PipelineConfig(**parts)


def load_config(path) -> PipelineConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config_text(p.read_text(), source=str(p))


def config_to_text(config: PipelineConfig) -> str:
    """Dump every key, one section.key = value per line (re-parseable)."""
    lines = []
    for section, cls in _SECTIONS.items():
        part = getattr(config, section)
        for fld in dataclasses.fields(cls):
            value = getattr(part, fld.name)
            if isinstance(value, tuple):
                text = ",".join(str(v) for v in value)
            elif value is None:
                text = "none"
            else:
                text = str(value)
            lines.append(f"{section}.{fld.name} = {text}")
    return "\n".join(lines) + "\n"
