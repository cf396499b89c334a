"""Run configuration as a nested YAML document.

Every field has a default, unknown keys are rejected, and printing a config
then parsing it back yields an equal object.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

import yaml

from .errors import ConfigError
from .losses import LossConfig
from .networks import DiscriminatorConfig, GeneratorConfig, InitSpec, StnConfig
from .trainer.loop import TrainConfig


@dataclass
class DataConfig:
    root: Optional[str] = None
    train_split: str = "train"
    eval_split: str = "test"
    # None defers to the manifest's threshold
    threshold: Optional[float] = None


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict:
        t = self.train
        out = {"train": {f.name: getattr(t, f.name) for f in fields(t) if f.name not in NESTED}}
        for name in NESTED:
            out[name] = dataclasses.asdict(getattr(t, name))
        out["data"] = dataclasses.asdict(self.data)
        return _plain(out)

    def to_text(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=False)

    @classmethod
    def from_dict(cls, doc: Optional[dict]) -> "RunConfig":
        doc = doc or {}
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a mapping")
        unknown = sorted(set(doc) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
        nested = {name: _build(SECTIONS[name], doc.get(name), name) for name in NESTED}
        train = _build(TrainConfig, doc.get("train"), "train", extra=nested)
        return cls(train, _build(DataConfig, doc.get("data"), "data"))

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        try:
            return cls.from_dict(yaml.safe_load(text))
        except yaml.YAMLError as exc:
            raise ConfigError(f"config is not valid YAML: {exc}") from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
        return cls.parse(text)

    def with_overrides(self, **train_overrides) -> "RunConfig":
        """Replace top-level train fields, skipping None values."""
        values = {k: v for k, v in train_overrides.items() if v is not None}
        try:
            return replace(self, train=replace(self.train, **values))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


NESTED = ("loss", "init", "generator", "discriminator", "stn")
SECTIONS = {"train": TrainConfig, "loss": LossConfig, "init": InitSpec, "generator": GeneratorConfig,
            "discriminator": DiscriminatorConfig, "stn": StnConfig, "data": DataConfig}


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _coerce(value: Any, hint, where: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], where)
    if origin in (tuple, typing.Tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} must be a list, got {value!r}")
        return tuple(_coerce(v, args[0], f"{where}[{i}]") for i, v in enumerate(value))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        try:
            # YAML 1.1 reads exponents without a dot (2e-4) as strings
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{where} must be a number, got {value!r}") from None
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    return value


def _build(cls, section: Optional[dict], name: str, extra: Optional[dict] = None):
    section = section or {}
    if not isinstance(section, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    hints = typing.get_type_hints(cls)
    allowed = [f.name for f in fields(cls) if not (extra and f.name in extra)]
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {name}: {', '.join(unknown)}")
    kwargs = {k: _coerce(v, hints[k], f"{name}.{k}") for k, v in section.items()}
    kwargs.update(extra or {})
    return cls(**kwargs)
