"""Nested run configuration: documented defaults, JSON file, flag overrides.

Sections and their defaults::

    seed      0           global seed (model init, shuffling, pretraining)
    dtype     "float64"   "float32" for faster runs
    data      n=200, normal_fraction=0.6, image_size=64, negation_prob=0.0,
              noise=0.03, ratios=[0.7, 0.1, 0.2]
    model     see ModelConfig (d_v=32, d_llm=64, 2+2 layers, 4 heads, ...)
    train     see TrainConfig (mode=shallow, lr=1e-4, batch_size=6, ...)
    pretrain  see PretrainConfig (steps=3000, lr=1e-3, batch_size=8)
    decode    beam_size=3, max_len=60, length_penalty=1.0

Unknown keys at any level raise :class:`ConfigError`.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any, Mapping, Optional

from .decode import DEFAULT_BEAM_SIZE, DEFAULT_MAX_LEN
from .model import ModelConfig
from .pretrain import PretrainConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


def defaults() -> dict[str, Any]:
    return {
        "seed": 0,
        "dtype": "float64",
        "data": {
            "n": 200,
            "normal_fraction": 0.6,
            "image_size": 64,
            "negation_prob": 0.0,
            "noise": 0.03,
            "ratios": [0.7, 0.1, 0.2],
        },
        "model": ModelConfig().to_dict(),
        "train": asdict(TrainConfig()),
        "pretrain": asdict(PretrainConfig()),
        "decode": {"beam_size": DEFAULT_BEAM_SIZE, "max_len": DEFAULT_MAX_LEN, "length_penalty": 1.0},
    }


def merge(base: dict, override: Mapping, where: str = "") -> dict:
    """Recursive update that refuses keys ``base`` does not already have."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{where}.{key}" if where else key
        if key not in out:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(out[key], dict):
            if not isinstance(value, Mapping):
                raise ConfigError(f"config key {path!r} must be a mapping")
            out[key] = merge(out[key], value, path)
        else:
            out[key] = value
    return out


def load(path: Optional[str] = None, overrides: Optional[Mapping] = None) -> dict:
    """Defaults, then the JSON file at ``path``, then ``overrides`` (flags win)."""
    cfg = defaults()
    if path:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            cfg = merge(cfg, json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if overrides:
        cfg = merge(cfg, overrides)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    if cfg["dtype"] not in ("float32", "float64"):
        raise ConfigError(f"dtype must be float32 or float64, got {cfg['dtype']!r}")
    try:
        model_config(cfg).encoder_config()
        train_config(cfg)
        pretrain_config(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    frac = cfg["data"]["normal_fraction"]
    if not 0.0 <= frac <= 1.0:
        raise ConfigError(f"data.normal_fraction must lie in [0, 1], got {frac}")
    if cfg["decode"]["beam_size"] < 1:
        raise ConfigError(f"decode.beam_size must be >= 1, got {cfg['decode']['beam_size']}")


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(**cfg["model"])


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict(cfg["train"])


def pretrain_config(cfg: dict) -> PretrainConfig:
    known = {f.name for f in fields(PretrainConfig)}
    return PretrainConfig(**{k: v for k, v in cfg["pretrain"].items() if k in known})


def nested(flat: Mapping[str, Any]) -> dict:
    """``{"train.lr": 1e-3}`` -> ``{"train": {"lr": 1e-3}}``; ``None`` values are dropped."""
    out: dict = {}
    for key, value in flat.items():
        if value is None:
            continue
        node = out
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return out


def dump(cfg: dict, path) -> None:
    Path(path).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")
