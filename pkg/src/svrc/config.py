"""Layered settings: built-in defaults < config file < environment < flags.

Config files are plain ``key = value`` lines; ``#`` starts a comment.
Every value is checked against its documented range when it is parsed.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping

from . import annealing, entropy
from .model_io import REGISTRY_ENV
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Setting:
    parse: Callable[[str], Any]
    default: Any
    check: Callable[[Any], bool]
    rule: str


def _optional_float(text: str):
    return None if str(text).strip().lower() in ("", "none") else float(text)


def _positive(v) -> bool:
    return v > 0 and math.isfinite(v)


SETTINGS: dict[str, Setting] = {
    "lambda": Setting(float, 0.01, _positive, "a positive number"),
    "M": Setting(int, 32, lambda v: 1 <= v <= 1024, "an integer in [1, 1024]"),
    "N": Setting(int, 16, lambda v: 1 <= v <= 1024, "an integer in [1, 1024]"),
    "levels_main": Setting(int, 60, lambda v: 2 <= v <= 4096, "an integer in [2, 4096]"),
    "levels_hyper": Setting(int, 60, lambda v: 2 <= v <= 4096, "an integer in [2, 4096]"),
    "init_range": Setting(float, 30.0, _positive, "a positive number"),
    "K": Setting(float, annealing.DEFAULT_K, lambda v: v >= 0 and math.isfinite(v), "a non-negative number"),
    "seed": Setting(int, 0, lambda v: 0 <= v < 2**63, "a non-negative integer"),
    "steps": Setting(int, 2000, lambda v: v >= 1, "a positive integer"),
    "batch": Setting(int, 8, lambda v: v >= 1, "a positive integer"),
    "patch": Setting(int, 64, lambda v: v >= 64 and v % 64 == 0, "a positive multiple of 64"),
    "learning_rate": Setting(float, 1e-3, _positive, "a positive number"),
    "quantizer_learning_rate": Setting(
        _optional_float, None, lambda v: v is None or _positive(v), "a positive number or 'none'"
    ),
    "patience": Setting(int, 50, lambda v: v >= 1, "a positive integer"),
    "epoch_steps": Setting(int, 20, lambda v: v >= 1, "a positive integer"),
    "refine_steps": Setting(int, 800, lambda v: v >= 1, "a positive integer"),
    "refine_learning_rate": Setting(float, 3e-3, _positive, "a positive number"),
    "refine_patience": Setting(int, 10, lambda v: v >= 1, "a positive integer"),
    "refine_epoch_steps": Setting(int, 50, lambda v: v >= 1, "a positive integer"),
    "gap_reduction": Setting(str, "mean", lambda v: v in ("mean", "sum"), "'mean' or 'sum'"),
    "scale_min": Setting(float, entropy.SIGMA_LOWER_BOUND, _positive, "a positive number"),
    "scale_max": Setting(float, 64.0, _positive, "a positive number"),
    "scale_count": Setting(int, 64, lambda v: 2 <= v <= 4096, "an integer in [2, 4096]"),
    "registry": Setting(str, "registry", lambda v: bool(v), "a non-empty path"),
    "data": Setting(str, "data", lambda v: bool(v), "a non-empty path"),
}

ENV_OVERRIDES = {"registry": REGISTRY_ENV}


def parse_value(key: str, text) -> Any:
    if key not in SETTINGS:
        raise ConfigError(f"unknown setting {key!r}")
    setting = SETTINGS[key]
    try:
        value = setting.parse(text) if isinstance(text, str) else setting.parse(str(text))
    except ValueError:
        raise ConfigError(f"{key} must be {setting.rule}, got {text!r}") from None
    if not setting.check(value):
        raise ConfigError(f"{key} must be {setting.rule}, got {text!r}")
    return value


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    values: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key = key.strip()
        try:
            values[key] = parse_value(key, value.strip())
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return values


def load_config_file(path) -> dict[str, Any]:
    path = Path(path)
    return parse_config_text(path.read_text(encoding="utf-8"), str(path))


def resolve(
    config_file=None,
    flags: Mapping[str, Any] | None = None,
    environ: Mapping[str, str] | None = None,
) -> dict[str, Any]:
    """Merge the layers; later layers win. ``None`` flag values are unset."""
    values = {key: s.default for key, s in SETTINGS.items()}
    if config_file is not None:
        values.update(load_config_file(config_file))
    env = os.environ if environ is None else environ
    for key, var in ENV_OVERRIDES.items():
        if env.get(var):
            values[key] = parse_value(key, env[var])
    for key, value in (flags or {}).items():
        if value is not None:
            values[key] = parse_value(key, value)
    if values["scale_max"] <= values["scale_min"]:
        raise ConfigError("scale_max must exceed scale_min")
    return values


def train_config(values: Mapping[str, Any], refine: bool = False, **overrides) -> TrainConfig:
    """TrainConfig for anchor training, or for refinement when `refine`."""
    fields = dict(
        lam=values["lambda"],
        seed=values["seed"],
        steps=values["steps"],
        M=values["M"],
        N=values["N"],
        levels_main=values["levels_main"],
        levels_hyper=values["levels_hyper"],
        init_range=values["init_range"],
        K=values["K"],
        batch=values["batch"],
        patch=values["patch"],
        learning_rate=values["learning_rate"],
        quantizer_learning_rate=values["quantizer_learning_rate"],
        patience=values["patience"],
        epoch_steps=values["epoch_steps"],
        gap_reduction=values["gap_reduction"],
    )
    if refine:
        fields.update(
            steps=values["refine_steps"],
            learning_rate=values["refine_learning_rate"],
            quantizer_learning_rate=None,
            patience=values["refine_patience"],
            epoch_steps=values["refine_epoch_steps"],
        )
    fields.update(overrides)
    return TrainConfig(**fields)


def scale_table_params(values: Mapping[str, Any]) -> list:
    return [values["scale_min"], values["scale_max"], values["scale_count"]]
