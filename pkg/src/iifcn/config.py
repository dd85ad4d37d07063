"""Plain-text ``section.key = value`` run configuration.

Sections are ``model``, ``augment``, ``train``, ``crf`` and ``run``. Lines
starting with ``#`` are comments. Unknown keys are rejected. Examples::

    model.widths = 16, 32, 64
    model.head = 3:2, 3:4
    train.stages = 60x60@4:30
    augment.zoom_range = 0.6, 1.0
"""

from __future__ import annotations

import re
import types
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .augment import AugmentConfig
from .crf import CrfParams
from .errors import ConfigError
from .model import ModelConfig
from .trainer import ScaleStage, TrainConfig


@dataclass(frozen=True)
class PathsConfig:
    data: str | None = None
    out: str | None = None


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    crf: CrfParams = field(default_factory=CrfParams)
    run: PathsConfig = field(default_factory=PathsConfig)

    @property
    def seed(self) -> int:
        return self.train.seed


_SECTIONS = {f.name: f for f in fields(RunConfig)}
_STAGE_RE = re.compile(r"^\s*(\d+)\s*x\s*(\d+)\s*@\s*(\d+)\s*:\s*(\d+)\s*$")


def _section_class(name: str):
    return {"model": ModelConfig, "augment": AugmentConfig, "train": TrainConfig,
            "crf": CrfParams, "run": PathsConfig}[name]


def _strip_optional(tp):
    args = typing.get_args(tp)
    if typing.get_origin(tp) in (typing.Union, types.UnionType) and type(None) in args:
        rest = [a for a in args if a is not type(None)]
        return rest[0], True
    return tp, False


def _parse_value(tp, text: str, key: str):
    tp, optional = _strip_optional(tp)
    text = text.strip()
    if optional and text.lower() in ("", "none"):
        return None
    try:
        if tp is bool:
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if tp in (int, float, str):
            return tp(text)
        origin, args = typing.get_origin(tp), typing.get_args(tp)
        if origin is tuple:
            items = [t for t in (s.strip() for s in text.split(",")) if t]
            elem = args[0]
            if elem is ScaleStage:
                out = []
                for it in items:
                    m = _STAGE_RE.match(it)
                    if not m:
                        raise ValueError(f"stage {it!r} is not HxW@BATCH:EPOCHS")
                    out.append(ScaleStage(*map(int, m.groups())))
                return tuple(out)
            if typing.get_origin(elem) is tuple:
                return tuple(tuple(int(p) for p in it.split(":")) for it in items)
            return tuple(elem(it) for it in items)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from exc
    raise ConfigError(f"{key}: unsupported field type {tp}")


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        parts = []
        for v in value:
            if isinstance(v, ScaleStage):
                parts.append(f"{v.height}x{v.width}@{v.batch_size}:{v.epochs}")
            elif isinstance(v, tuple):
                parts.append(":".join(str(p) for p in v))
            else:
                parts.append(repr(v) if isinstance(v, float) else str(v))
        return ", ".join(parts)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    updates: dict[str, dict[str, object]] = {name: {} for name in _SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if "." not in key:
            raise ConfigError(f"line {lineno}: key {key!r} needs a section prefix")
        section, name = key.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(f"line {lineno}: unknown section {section!r}")
        cls = _section_class(section)
        hints = typing.get_type_hints(cls)
        if name not in {f.name for f in fields(cls)}:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        updates[section][name] = _parse_value(hints[name], value, key)
    sections = {}
    for name, vals in updates.items():
        current = getattr(cfg, name)
        try:
            sections[name] = replace(current, **vals) if vals else current
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"section {name}: {exc}") from exc
    return RunConfig(**sections)


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        for f in fields(obj):
            lines.append(f"{section}.{f.name} = {_format_value(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
