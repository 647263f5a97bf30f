"""Flat run configuration: defaults, JSON file, ``key=value`` overrides."""

from __future__ import annotations

import json
from dataclasses import fields
from pathlib import Path

from .backbone import ModelConfig
from .synthdata import SynthSpec
from .training import TrainConfig

__all__ = ["ConfigError", "CONFIG_VERSION", "default_config", "resolve_config", "write_config", "model_config", "train_config", "synth_spec"]

CONFIG_VERSION = 1

_TILING = {"threshold_mode": "otsu", "min_tissue_fraction": 0.25, "fixed_threshold": 0.1}
_RUN = {"config_version": CONFIG_VERSION, "deterministic": False, "n_slides": 60}
# synth_* keys mirror SynthSpec; its seed and tile size come from the top-level keys
_SYNTH_SKIP = {"seed", "tile_size_px"}


class ConfigError(ValueError):
    pass


def _defaults(cls, skip=()) -> dict:
    inst = cls()
    return {f.name: getattr(inst, f.name) for f in fields(cls) if f.name not in skip}


def default_config() -> dict:
    cfg = dict(_RUN)
    cfg.update(_defaults(ModelConfig))
    cfg.update(_defaults(TrainConfig))
    cfg.update(_TILING)
    cfg.update({f"synth_{k}": v for k, v in _defaults(SynthSpec, _SYNTH_SKIP).items()})
    return _jsonable(cfg)


def _jsonable(cfg: dict) -> dict:
    return json.loads(json.dumps(cfg))


def parse_override(item: str) -> tuple[str, object]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _coerce(key: str, value, default):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(value, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return value
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


def resolve_config(path=None, overrides=(), base: dict | None = None) -> dict:
    """Defaults, then the JSON file at ``path``, then ``key=value`` overrides."""
    cfg = default_config()
    layers = [base or {}]
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: cannot read config ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        layers.append(doc)
    layers.append(dict(parse_override(o) if isinstance(o, str) else o for o in overrides))
    for layer in layers:
        unknown = sorted(set(layer) - set(cfg))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for key, value in layer.items():
            cfg[key] = _coerce(key, value, cfg[key])
    if cfg["config_version"] != CONFIG_VERSION:
        raise ConfigError(f"incompatible config version {cfg['config_version']} (expected {CONFIG_VERSION})")
    try:
        model_config(cfg)
        train_config(cfg)
        synth_spec(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def write_config(cfg: dict, out_dir, name: str = "config.json") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")
    return path


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(**{f.name: cfg[f.name] for f in fields(ModelConfig)})


def train_config(cfg: dict) -> TrainConfig:
    kw = {f.name: cfg[f.name] for f in fields(TrainConfig)}
    kw["split_ratios"] = tuple(kw["split_ratios"])
    return TrainConfig(**kw)


def synth_spec(cfg: dict) -> SynthSpec:
    kw = {f.name: cfg[f"synth_{f.name}"] for f in fields(SynthSpec) if f.name not in _SYNTH_SKIP}
    for key in ("disc_radius_px", "ring_radius_tiles"):
        kw[key] = tuple(kw[key])
    return SynthSpec(tile_size_px=cfg["patch_size"], seed=cfg["seed"], **kw)
