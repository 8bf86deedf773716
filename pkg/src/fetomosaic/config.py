"""Pipeline configuration stored as an INI document with one section per stage."""
from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, Optional

from .errors import ConfigError
from .features import DetectorConfig, MatcherConfig
from .geometry import FilterThresholds
from .metrics import EvalConfig
from .mosaic import FusionConfig
from .registration import LMConfig, RansacConfig, RegistrationConfig
from .synth import OccluderSpec, PathSpec, PhotometricSpec


@dataclass(frozen=True)
class SynthConfig:
    frames: int = 200
    frame_size: int = 448
    texture_size: int = 0  # 0 = derived from frame_size
    seed: int = 0
    occluders: int = 0
    occluder_coverage: float = 0.2
    path: PathSpec = field(default_factory=PathSpec)
    photometric: PhotometricSpec = field(default_factory=PhotometricSpec)


@dataclass(frozen=True)
class RunConfig:
    workers: int = 1
    mosaic_stride: int = 1
    mosaic_identity_substitution: bool = False
    fov_margin: float = 8.0


@dataclass(frozen=True)
class PipelineConfig:
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    matcher: MatcherConfig = field(default_factory=MatcherConfig)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    lm: LMConfig = field(default_factory=LMConfig)
    filter: FilterThresholds = field(default_factory=FilterThresholds)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    run: RunConfig = field(default_factory=RunConfig)
    mask_dilation: float = 2.0
    max_skip: int = 5

    def registration(self) -> RegistrationConfig:
        return RegistrationConfig(self.detector, self.matcher, self.ransac, self.lm, self.filter,
                                  self.mask_dilation, self.max_skip)


def _coerce(raw: str, typ, name: str):
    origin = typing.get_origin(typ)
    if origin is typing.Union:
        args = [a for a in typing.get_args(typ) if a is not type(None)]
        if raw.strip().lower() in ("", "none", "auto", "null"):
            return None
        typ = args[0]
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return str(raw)
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from exc


def _apply(obj, values: Dict[str, str], section: str):
    hints = typing.get_type_hints(type(obj))
    known = {f.name for f in fields(obj) if not is_dataclass(getattr(obj, f.name))}
    updates: Dict[str, Any] = {}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"unknown key [{section}] {key}")
        updates[key] = _coerce(raw, hints[key], f"[{section}] {key}")
    try:
        return dataclasses.replace(obj, **updates)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def _walk(cfg, prefix=""):
    """Yield ``(dotted section name, dataclass instance)`` for every nested config."""
    for f in fields(cfg):
        val = getattr(cfg, f.name)
        if is_dataclass(val):
            name = f"{prefix}{f.name}"
            yield name, val
            yield from _walk(val, name + ".")


def _set_path(cfg, path: str, value):
    head, _, rest = path.partition(".")
    if not rest:
        return dataclasses.replace(cfg, **{head: value})
    return dataclasses.replace(cfg, **{head: _set_path(getattr(cfg, head), rest, value)})


def _get_path(cfg, path: str):
    for part in path.split("."):
        cfg = getattr(cfg, part)
    return cfg


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, str]] = None) -> PipelineConfig:
    """Read an INI file (optional) on top of defaults, then ``section.key=value`` overrides."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            parser.read(p)
        except configparser.Error as exc:
            raise ConfigError(f"bad config file: {exc}") from exc
    for dotted, raw in (overrides or {}).items():
        section, _, key = dotted.rpartition(".")
        section = section or "pipeline"
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, str(raw))

    cfg = PipelineConfig()
    sections = dict(_walk(cfg))
    for section in parser.sections():
        values = dict(parser.items(section))
        if section == "pipeline":
            cfg = _apply(cfg, values, section)
            continue
        if section not in sections:
            raise ConfigError(f"unknown section [{section}]")
        cfg = _set_path(cfg, section, _apply(_get_path(cfg, section), values, section))
    return cfg


def _fmt(val) -> str:
    if val is None:
        return "auto"
    return repr(val) if isinstance(val, float) else str(val)


def dump_config(cfg: PipelineConfig) -> str:
    """Render the fully resolved configuration as INI text."""
    lines = ["[pipeline]"]
    for f in fields(cfg):
        val = getattr(cfg, f.name)
        if not is_dataclass(val):
            lines.append(f"{f.name} = {_fmt(val)}")
    for section, obj in _walk(cfg):
        lines.append("")
        lines.append(f"[{section}]")
        for f in fields(obj):
            val = getattr(obj, f.name)
            if not is_dataclass(val):
                lines.append(f"{f.name} = {_fmt(val)}")
    return "\n".join(lines) + "\n"
