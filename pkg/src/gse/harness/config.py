"""INI config files with ``section.key=value`` overrides.

Recognised sections are ``[task]`` (TaskSpec), ``[gse]`` (GseConfig),
``[train]`` (TrainConfig), ``[compare]`` and ``[output]``. Unknown sections or
keys are rejected so typos fail loudly. Overrides given on the command line
are applied after the file and therefore win.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from gse.core import GseConfig
from gse.harness.tasks import TaskSpec
from gse.harness.training import TrainConfig

__all__ = ["CompareConfig", "ConfigError", "HarnessConfig", "OutputConfig", "load_config"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CompareConfig:
    kinds: tuple[str, ...] = ("gse", "lora", "pissa_style")
    trials: int = 10
    workers: int = 1
    lora_scale: float = 1.0

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError(f"trials must be >= 1, got {self.trials}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")


@dataclass(frozen=True)
class OutputConfig:
    name: str = "run"


@dataclass(frozen=True)
class HarnessConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    gse: GseConfig = field(default_factory=GseConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    compare: CompareConfig = field(default_factory=CompareConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            section = getattr(self, f.name)
            out[f.name] = {k.name: _plain(getattr(section, k.name)) for k in dataclasses.fields(section)}
        return out


def _plain(v):
    if isinstance(v, Enum):
        return v.value
    if isinstance(v, tuple):
        return list(v)
    return v


_SECTIONS = {f.name: f for f in dataclasses.fields(HarnessConfig)}


def _coerce(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            return {"true": True, "false": False, "1": True, "0": False}[raw.lower()]
        if isinstance(default, Enum):
            return type(default)(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(t.strip() for t in raw.split(",") if t.strip())
        return raw
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} ({exc})") from None


def _apply(values: dict[str, dict[str, str]]) -> HarnessConfig:
    sections = {}
    for name, f in _SECTIONS.items():
        base = f.default_factory()
        updates = {}
        fields = {k.name for k in dataclasses.fields(base)}
        for key, raw in values.get(name, {}).items():
            if key not in fields:
                raise ConfigError(f"unknown key {name}.{key}; expected one of {sorted(fields)}")
            updates[key] = _coerce(raw, getattr(base, key), f"{name}.{key}")
        try:
            sections[name] = dataclasses.replace(base, **updates)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{name}] {exc}") from None
    return HarnessConfig(**sections)


def parse_override(text: str) -> tuple[str, str, str]:
    key, sep, value = text.partition("=")
    section, dot, name = key.strip().partition(".")
    if not sep or not dot or not section or not name:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    return section, name, value


def load_config(path=None, overrides=()) -> HarnessConfig:
    """Read ``path`` (optional) then apply ``overrides``; flags win."""
    values: dict[str, dict[str, str]] = {}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            parser.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from None
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown section [{section}] in {path}; expected {sorted(_SECTIONS)}")
            values[section] = dict(parser[section])
    for text in overrides:
        section, name, value = parse_override(text)
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section {section!r} in override {text!r}")
        values.setdefault(section, {})[name] = value
    return _apply(values)
