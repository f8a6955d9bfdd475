"""Hierarchical run configuration: defaults, then a YAML file, then ``--set`` overrides."""

from __future__ import annotations

import os
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any

import yaml

from .datagen import BenchmarkConfig
from .params import AdapterConfig
from .training import TrainConfig

SEED_ENV = "SYNERNET_SEED"


class ConfigError(ValueError):
    pass


def _train_section_defaults() -> dict:
    d = TrainConfig().to_dict()
    d.pop("adapter")
    d.pop("seed")
    return d


def defaults() -> dict:
    return {
        "seed": None,
        "benchmark": {**asdict(BenchmarkConfig()), "seed": None},
        "train": _train_section_defaults(),
        "adapter": asdict(AdapterConfig()),
        "ablation": {"seeds": 5, "workers": 1},
        "eval": {"seeds": [0, 1, 2]},
    }


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = dict(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def parse_override(text: str) -> dict:
    """``a.b=value`` to ``{"a": {"b": value}}``; the value is parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key.path=value")
    key, raw = text.split("=", 1)
    value: Any = yaml.safe_load(raw) if raw else None
    for part in reversed(key.strip().split(".")):
        value = {part: value}
    return value


def load(path: str | Path | None = None, overrides: list[str] = (), env: dict | None = None) -> dict:
    """Effective configuration; every key is present in the result."""
    cfg = defaults()
    if path is not None:
        text = Path(path).read_text()
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg = _merge(cfg, data)
    for o in overrides:
        cfg = _merge(cfg, parse_override(o))
    env = os.environ if env is None else env
    if cfg["seed"] is None:
        raw = env.get(SEED_ENV)
        try:
            cfg["seed"] = int(raw) if raw not in (None, "") else 0
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={raw!r} is not an integer") from None
    if cfg["benchmark"]["seed"] is None:
        cfg["benchmark"]["seed"] = cfg["seed"]
    return cfg


def benchmark_config(cfg: dict) -> tuple[BenchmarkConfig, int]:
    b = dict(cfg["benchmark"])
    seed = int(b.pop("seed"))
    return BenchmarkConfig(**b), seed


def train_config(cfg: dict) -> TrainConfig:
    t = dict(cfg["train"])
    names = {f.name for f in fields(TrainConfig)}
    unknown = set(t) - names
    if unknown:
        raise ConfigError(f"unknown train keys {sorted(unknown)}")
    return TrainConfig.from_dict({**t, "seed": int(cfg["seed"]), "adapter": dict(cfg["adapter"])})


def dump(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=False)
