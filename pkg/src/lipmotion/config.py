"""Run configuration: defaults < config file < command-line overrides."""
from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import yaml

from .appearance import APPEARANCE_PRESETS, AppearanceModelConfig
from .core_types import ConfigurationError
from .identity import IDENTITY_PRESETS, IdentityExtractorConfig
from .motion import MOTION_PRESETS, MotionModelConfig

STAGE_TYPES = {"identity": IdentityExtractorConfig, "motion": MotionModelConfig, "appearance": AppearanceModelConfig}
PRESETS = {"identity": IDENTITY_PRESETS, "motion": MOTION_PRESETS, "appearance": APPEARANCE_PRESETS}
DATA_DEFAULTS = {"ids": 30, "clips": 2, "frames": 100, "seed": 0, "image_size": 64}


def default_config(preset: str = "desk") -> dict:
    if preset not in IDENTITY_PRESETS:
        raise ConfigurationError(f"unknown preset {preset!r}; choose from {sorted(IDENTITY_PRESETS)}")
    cfg = {"preset": preset, "seed": 0, "deterministic": False, "data": dict(DATA_DEFAULTS)}
    for stage, table in PRESETS.items():
        cfg[stage] = dataclasses.asdict(table[preset])
    return cfg


def _merge(base: dict, extra: dict, where: str) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if k not in out:
            raise ConfigurationError(f"unknown config key {where}{k}")
        if isinstance(out[k], dict):
            if not isinstance(v, dict):
                raise ConfigurationError(f"{where}{k} must be a mapping")
            out[k] = _merge(out[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def parse_override(text: str) -> dict:
    """``motion.epochs=50`` -> {"motion": {"epochs": 50}}; values are parsed as YAML scalars."""
    if "=" not in text:
        raise ConfigurationError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    value = yaml.safe_load(raw) if raw else ""
    node: dict = {}
    cur = node
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = value
    return node


def load_config_file(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"config file {p} not found")
    data = yaml.safe_load(p.read_text()) or {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{p}: top level must be a mapping")
    return data


def resolve_config(preset: str | None = None, config_file=None, overrides=()) -> dict:
    file_cfg = load_config_file(config_file) if config_file else {}
    preset = preset or file_cfg.get("preset", "desk")
    cfg = default_config(preset)
    cfg = _merge(cfg, {k: v for k, v in file_cfg.items() if k != "preset"}, "")
    for o in overrides:
        cfg = _merge(cfg, parse_override(o), "")
    return cfg


def stage_config(cfg: dict, stage: str):
    try:
        return STAGE_TYPES[stage](**cfg[stage])
    except TypeError as exc:
        raise ConfigurationError(f"bad {stage} config: {exc}") from exc


def save_resolved(cfg: dict, directory, name: str = "resolved_config.json") -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    path = d / name
    path.write_text(json.dumps(cfg, indent=1, sort_keys=True, default=list))
    return path
