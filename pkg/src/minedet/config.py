"""Experiment configuration files.

One YAML file describes a whole experiment: the synthetic world, the
optimizer/loop settings, the seed-annotation sweep, and where artifacts go.
Sections mirror the dataclasses they populate (``world`` -> WorldConfig,
``train`` -> TrainConfig, ``train.model`` -> ModelConfig), so the exact
grammar is the field list of those classes; unknown or mistyped keys are
rejected by name rather than ignored.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field

import yaml

from .model import ModelConfig, VariantFlags
from .scenegen import WorldConfig
from .trainer import TrainConfig


class ConfigError(Exception):
    """Raised for unparseable files or bad fields; message names the field."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a full run needs, as loaded from one file."""

    world: WorldConfig = field(default_factory=WorldConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    source_train: TrainConfig | None = None  # defaults to `train` when omitted
    seeds_per_category: tuple[int, ...] = (15,)
    eval_images: int = 100
    rng_seeds: tuple[int, ...] = (0,)
    out_dir: str | None = None

    def __post_init__(self):
        if not self.seeds_per_category:
            raise ValueError("seeds_per_category must not be empty")
        if any(k < 0 for k in self.seeds_per_category):
            raise ValueError("seeds_per_category entries must be >= 0")
        if not self.rng_seeds:
            raise ValueError("rng_seeds must not be empty")
        if not 0 <= self.eval_images:
            raise ValueError("eval_images must be >= 0")
        if self.eval_images >= self.world.num_target_images:
            raise ValueError(
                "eval_images must leave at least one target image for training"
            )


def _type_name(tp) -> str:
    return getattr(tp, "__name__", str(tp))


def _coerce(value, tp, where: str):
    """Recursively build `tp` from plain YAML data, naming bad fields."""
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        for arg in args:
            if arg is type(None):
                continue
            return _coerce(value, arg, where)
    if dataclasses.is_dataclass(tp):
        return _build_dataclass(tp, value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"field '{where}': expected a list")
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            elem_types = [args[0]] * len(value)
        else:
            if len(value) != len(args):
                raise ConfigError(
                    f"field '{where}': expected {len(args)} entries, got {len(value)}"
                )
            elem_types = list(args)
        return tuple(
            _coerce(v, et, f"{where}[{i}]")
            for i, (v, et) in enumerate(zip(value, elem_types))
        )
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"field '{where}': expected bool, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"field '{where}': expected int, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"field '{where}': expected number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"field '{where}': expected string, got {value!r}")
        return value
    return value


def _build_dataclass(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"field '{where}': expected a mapping for {cls.__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(
            f"unknown field '{where}.{unknown[0]}' (valid: {', '.join(sorted(names))})"
        )
    kwargs = {}
    for key, raw in data.items():
        kwargs[key] = _coerce(raw, hints[key], f"{where}.{key}")
    try:
        return cls(**kwargs)
    except ValueError as err:
        raise ConfigError(f"section '{where}': {err}") from err


def config_from_dict(data: dict, where: str = "config") -> ExperimentConfig:
    return _build_dataclass(ExperimentConfig, data, where)


def load_config(path) -> ExperimentConfig:
    """Parse a YAML experiment file; errors carry line/field diagnostics."""
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as err:
        mark = getattr(err, "problem_mark", None)
        at = f" (line {mark.line + 1}, column {mark.column + 1})" if mark else ""
        raise ConfigError(f"{path}: invalid YAML{at}: {err}") from err
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(data, where="config")
