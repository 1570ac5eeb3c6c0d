"""Flat ``section.key = value`` configuration files and dataclass (de)serialization."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from dagseg.data import AugmentationConfig
from dagseg.model import ModelConfig
from dagseg.train import TrainRunConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    dir: str = "data"
    num_samples: int = 50
    size: tuple[int, int] = (256, 256)
    seed: int = 0


@dataclass
class SweepConfig:
    epochs: int = 5
    heads: tuple[int, ...] = (1, 2, 3, 4, 5, 6, 7, 8, 9, 10)
    w_dice: tuple[float, ...] = (0.0, 0.3, 0.5, 0.7, 1.0)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainRunConfig = field(default_factory=TrainRunConfig)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    data: DataConfig = field(default_factory=DataConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)


def _format(value) -> str:
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, hint):
    text = text.strip()
    origin = typing.get_origin(hint)
    if origin is tuple:
        args = typing.get_args(hint)
        items = [t for t in text.replace("x", ",").split(",") if t.strip()] if text else []
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_parse(t, args[0]) for t in items)
        if len(items) != len(args):
            raise ConfigError(f"expected {len(args)} comma-separated values, got {text!r}")
        return tuple(_parse(t, a) for t, a in zip(items, args))
    if hint is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    if isinstance(hint, type) and issubclass(hint, Enum):
        try:
            return hint(text)
        except ValueError:
            choices = ", ".join(m.value for m in hint)
            raise ConfigError(f"{text!r} is not one of {choices}") from None
    try:
        return hint(text)
    except (TypeError, ValueError):
        raise ConfigError(f"cannot parse {text!r} as {getattr(hint, '__name__', hint)}") from None


def to_flat(obj) -> dict[str, str]:
    """Dataclass -> ``{field: formatted value}``; nested dataclasses get dotted keys."""
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            for k, v in to_flat(value).items():
                out[f"{f.name}.{k}"] = v
        else:
            out[f.name] = _format(value)
    return out


def from_flat(cls, flat: dict[str, str]):
    """Build ``cls`` from string values; unknown keys raise ``ConfigError``."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    nested: dict[str, dict[str, str]] = {}
    kwargs = {}
    for key, text in flat.items():
        head, _, rest = key.partition(".")
        if head not in names:
            raise ConfigError(f"unknown config key {key!r}")
        hint = hints[head]
        if dataclasses.is_dataclass(hint):
            if not rest:
                raise ConfigError(f"{key!r} is a section, not a key")
            nested.setdefault(head, {})[rest] = text
        else:
            if rest:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[head] = _parse(str(text), hint)
    for head, sub in nested.items():
        kwargs[head] = from_flat(hints[head], sub)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def parse_lines(text: str) -> dict[str, str]:
    flat = {}
    section = ""
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        flat[f"{section}.{key}" if section else key] = value
    return flat


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    """Read ``path`` (optional) then apply ``key=value`` overrides, which win."""
    flat = to_flat(RunConfig())
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        _merge(flat, parse_lines(p.read_text()))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        _merge(flat, {key: value})
    return from_flat(RunConfig, flat)


def _merge(flat: dict[str, str], new: dict[str, str]) -> None:
    for key, value in new.items():
        if key not in flat:
            raise ConfigError(f"unknown config key {key!r}")
        flat[key] = value


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in to_flat(cfg).items())
