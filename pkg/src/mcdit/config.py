"""Run configuration: INI-style sections of key=value pairs.

Every field has a default; unknown sections or keys are rejected so typos
never pass silently. CLI flags override file values.
"""

from __future__ import annotations

import configparser
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigurationError
from .model import ModelConfig


@dataclass
class TrainSettings:
    stage: str = "base"
    steps: int = 200
    batch_size: int = 4
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    seed: int = 0
    log_every: int = 10
    lr_schedule: str = "constant"
    conditions: tuple[str, ...] = ()
    lora_rank: int = 4
    lora_alpha: float = 4.0
    train_text_adapter: bool = False


@dataclass
class DataConfig:
    dir: str = "data/toy"
    count: int = 200
    seed: int = 0


@dataclass
class SamplingConfig:
    steps: int = 16
    seed: int = 0
    mode: str = "training-free"
    conditions: tuple[str, ...] = ()


@dataclass
class OutputConfig:
    dir: str = "runs"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    data: DataConfig = field(default_factory=DataConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    output: OutputConfig = field(default_factory=OutputConfig)


_SECTIONS = {
    "model": ModelConfig,
    "train": TrainSettings,
    "data": DataConfig,
    "sampling": SamplingConfig,
    "output": OutputConfig,
}


def _coerce(ftype, raw: str, key: str):
    origin = typing.get_origin(ftype)
    if origin is tuple:
        return tuple(x.strip() for x in raw.split(",") if x.strip())
    if ftype is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"{key}: expected a boolean, got {raw!r}")
    if ftype is int:
        return int(raw)
    if ftype is float:
        return float(raw)
    if ftype is str:
        return raw.strip()
    raise ConfigurationError(f"{key}: unsupported field type {ftype}")


def _build_section(cls, values: dict[str, str], section: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    kwargs = {}
    for key, raw in values.items():
        if key not in names:
            raise ConfigurationError(f"unknown key [{section}] {key}")
        kwargs[key] = _coerce(hints[key], raw, f"[{section}] {key}")
    return cls(**kwargs)


def load_config(path: Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Parse a config file (optional) and apply ``section.key=value`` overrides."""
    raw: dict[str, dict[str, str]] = {name: {} for name in _SECTIONS}
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigurationError(f"config file not found: {path}")
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigurationError(f"unknown config section [{section}]")
            for key, value in parser.items(section):
                raw[section][key] = value
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigurationError(f"override must look like section.key=value, got {item!r}")
        lhs, value = item.split("=", 1)
        section, key = lhs.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigurationError(f"unknown config section [{section}]")
        raw[section][key.strip()] = value
    built = {name: _build_section(cls, raw[name], name) for name, cls in _SECTIONS.items()}
    return RunConfig(**built)


def write_config(path: Path, config: RunConfig) -> None:
    parser = configparser.ConfigParser()
    for name, cls in _SECTIONS.items():
        obj = getattr(config, name)
        parser[name] = {}
        for f in fields(cls):
            v = getattr(obj, f.name)
            parser[name][f.name] = ",".join(v) if isinstance(v, tuple) else str(v)
    with open(path, "w") as fh:
        parser.write(fh)
