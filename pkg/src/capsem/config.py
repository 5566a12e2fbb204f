"""Flat ``section.key = value`` experiment files.

Every run writes a resolved snapshot with all defaults spelled out; feeding
that snapshot back reproduces the run.
"""

from __future__ import annotations

import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .a2c import TrainConfig
from .layers import ConfigError
from .maze import SCENARIOS, SPARSITY, TEXTURES
from .nets import ArchConfig


@dataclass
class ScenarioConfig:
    name: str = "mini"
    sparsity: str = "dense"
    texture: str = "varied"
    frameskip: int = 1

    def __post_init__(self):
        if self.name not in SCENARIOS and not self.name.endswith(".map"):
            raise ConfigError(f"scenario.name: unknown scenario {self.name!r}")
        if self.sparsity not in SPARSITY:
            raise ConfigError(f"scenario.sparsity: expected one of {SPARSITY}, got {self.sparsity!r}")
        if self.texture not in TEXTURES:
            raise ConfigError(f"scenario.texture: expected one of {TEXTURES}, got {self.texture!r}")


@dataclass
class RunConfig:
    out_dir: str = "runs/default"
    curriculum: str = ""  # checkpoint to pre-load, empty for none


@dataclass
class ExperimentConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    net: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    run: RunConfig = field(default_factory=RunConfig)


SECTIONS = {"scenario": ScenarioConfig, "net": ArchConfig, "train": TrainConfig, "run": RunConfig}


def _coerce(key: str, raw: str, kind):
    raw = raw.strip()
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "'\"":
        raw = raw[1:-1]
    try:
        if kind is bool:
            if raw.lower() not in ("true", "false"):
                raise ValueError
            return raw.lower() == "true"
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {kind.__name__}") from None
    return raw


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def parse_config(text: str, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    values: dict[str, dict[str, object]] = {name: {} for name in SECTIONS}
    items = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, raw = line.partition("=")
        if not eq:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {line!r}")
        items.append((key.strip(), raw))
    items += list((overrides or {}).items())
    for key, raw in items:
        section, dot, name = key.partition(".")
        if not dot or section not in SECTIONS:
            raise ConfigError(f"{key}: unknown section; expected one of {', '.join(SECTIONS)}")
        hints = typing.get_type_hints(SECTIONS[section])
        if name not in {f.name for f in fields(SECTIONS[section])}:
            raise ConfigError(f"{key}: unknown key")
        values[section][name] = _coerce(key, raw, hints[name])
    built = {}
    for section, cls in SECTIONS.items():
        try:
            built[section] = cls(**values[section])
        except ConfigError as e:
            msg = str(e)
            raise ConfigError(msg if msg.startswith(section + ".") else f"{section}: {msg}") from None
    return ExperimentConfig(**built)


def load_config(path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    return parse_config(Path(path).read_text(), overrides)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for section in SECTIONS:
        obj = getattr(cfg, section)
        for f in fields(obj):
            lines.append(f"{section}.{f.name} = {_format(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"
