"""Run configuration and its flat ``key = value`` text form."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .augment import AugmentConfig
from .model import ModelConfig
from .optim import AdamWConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    optim: AdamWConfig = field(default_factory=AdamWConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    batch_size: int = 64
    epochs: int = 1
    seed: int = 0
    clip_norm: float = 1.0
    shuffle: bool = True
    data: str = "synthetic"
    synthetic_n: int = 64
    synthetic_test_n: int = 0
    train_subset: int = 0
    out_dir: str = ""
    eval_batch_size: int = 256

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.model.norm == "batchnorm" and self.batch_size < 2:
            raise ConfigError("batchnorm training needs batch_size >= 2")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")

    def replace(self, **overrides: Any) -> "RunConfig":
        return from_mapping({**to_mapping(self), **{k: str(v) for k, v in overrides.items()}})


_SECTIONS = {"model": ModelConfig, "optim": AdamWConfig, "augment": AugmentConfig}


def _hints(cls) -> dict[str, Any]:
    return typing.get_type_hints(cls)


def _converter(tp):
    if tp is bool:
        return _parse_bool
    if tp is int:
        return int
    if tp is float:
        return float
    return str


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _key_owner() -> dict[str, Optional[str]]:
    owner: dict[str, Optional[str]] = {}
    for section, cls in _SECTIONS.items():
        for f in dataclasses.fields(cls):
            owner[f.name] = section
    for f in dataclasses.fields(RunConfig):
        if f.name not in _SECTIONS:
            owner[f.name] = None
    return owner


def to_mapping(cfg: RunConfig) -> dict[str, str]:
    out: dict[str, str] = {}
    for section in _SECTIONS:
        sub = getattr(cfg, section)
        for f in dataclasses.fields(sub):
            out[f.name] = _format(getattr(sub, f.name))
    for f in dataclasses.fields(RunConfig):
        if f.name not in _SECTIONS:
            out[f.name] = _format(getattr(cfg, f.name))
    return out


def from_mapping(values: dict[str, str]) -> RunConfig:
    owner = _key_owner()
    unknown = sorted(set(values) - set(owner))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    parts: dict[Optional[str], dict[str, Any]] = {None: {}, **{s: {} for s in _SECTIONS}}
    hints = {s: _hints(c) for s, c in _SECTIONS.items()}
    hints[None] = _hints(RunConfig)
    for key, raw in values.items():
        section = owner[key]
        try:
            parts[section][key] = _converter(hints[section][key])(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None
    try:
        model = ModelConfig(**parts["model"])
        optim = AdamWConfig(**parts["optim"])
        augment = AugmentConfig(**parts["augment"])
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(model=model, optim=optim, augment=augment, **parts[None])


def parse_text(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def loads(text: str) -> RunConfig:
    return from_mapping(parse_text(text))


def dumps(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in to_mapping(cfg).items())


def load(path) -> RunConfig:
    return loads(Path(path).read_text())
