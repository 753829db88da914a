"""Training configuration: defaults, file loading, env and flag overrides.

Layering order is file < environment (UTRICE_<KEY>) < command-line flags.
Unknown keys are rejected by name.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib


@dataclass
class TrainConfig:
    # run
    iterations: int = 30000
    seed: int = 0
    threads: int = 1
    # tracer
    k: int = 16
    t_term: float = 1e-3
    spp: int = 1
    background: tuple = (0.0, 0.0, 0.0)
    # learning rates
    feature_lr: float = 0.0025
    opacity_lr: float = 0.014
    lr_sigma: float = 0.0008
    lr_vertices: float = 0.0011
    vertex_lr_final_mult: float = 0.01
    # loss weights
    lambda_dssim: float = 0.2
    lambda_normals: float = 0.0001
    lambda_opacity: float = 0.0055
    lambda_size: float = 1e-8
    # pruning / densification
    opacity_dead: float = 0.014
    importance_threshold: float = 0.022
    split_size: float = 0.019
    max_noise_factor: float = 1.5
    add_shape: float = 1.3
    densification_interval: int = 500
    densify_from_iter: int = 500
    densify_until_iter: int = 25000
    max_triangles: int = 1_000_000
    # appearance
    sh_warmup: int = 1000
    opacity_init: float = 0.28
    sigma_init: float = 1.0
    # logging
    log_interval: int = 100
    checkpoint_interval: int = 5000
    test_interval: int = 5000

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["background"] = list(d["background"])
        return d

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(key: str, value):
    """Coerce a raw override (possibly a string) to the field's type."""
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key: {key!r}")
    current = getattr(TrainConfig(), key)
    if key == "background":
        if isinstance(value, str):
            value = [float(x) for x in value.split(",")]
        value = tuple(float(x) for x in value)
        if len(value) != 3:
            raise ConfigError("background must be three comma-separated numbers")
        return value
    if isinstance(current, bool):
        if isinstance(value, str):
            return value.lower() in ("1", "true", "yes", "on")
        return bool(value)
    if isinstance(current, int) and not isinstance(value, bool):
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"config key {key!r} expects an integer, got {value!r}")
    if isinstance(current, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"config key {key!r} expects a number, got {value!r}")
    return value


def load_config_file(path: str | Path) -> dict:
    """Raw key/value dict from a TOML or JSON config file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    if path.suffix.lower() == ".json":
        data = json.loads(path.read_text())
    elif path.suffix.lower() == ".toml":
        data = tomllib.loads(path.read_text())
    else:
        raise ConfigError(f"config file must be .toml or .json: {path}")
    if not isinstance(data, dict):
        raise ConfigError(f"config file must hold a table/object: {path}")
    return data


def env_overrides(environ=None) -> dict:
    """Overrides from UTRICE_<KEY> environment variables."""
    if environ is None:
        environ = os.environ
    out = {}
    for f in fields(TrainConfig):
        var = "UTRICE_" + f.name.upper()
        if var in environ:
            out[f.name] = environ[var]
    return out


def build_config(file_path=None, env=None, flag_overrides=None) -> TrainConfig:
    """Layer file < env < flags into a validated TrainConfig."""
    merged = {}
    if file_path is not None:
        for k, v in load_config_file(file_path).items():
            merged[k] = _coerce(k, v)
    for k, v in env_overrides(env).items():
        merged[k] = _coerce(k, v)
    if flag_overrides:
        for k, v in flag_overrides.items():
            if v is not None:
                merged[k] = _coerce(k, v)
    cfg = TrainConfig(**merged)
    validate_config(cfg)
    return cfg


def validate_config(cfg: TrainConfig) -> None:
    for name in ("lambda_dssim", "lambda_normals", "lambda_opacity", "lambda_size"):
        if getattr(cfg, name) < 0:
            raise ConfigError(f"{name} must be >= 0")
    for name in ("opacity_dead", "importance_threshold"):
        v = getattr(cfg, name)
        if not 0.0 < v < 1.0:
            raise ConfigError(f"{name} must lie in (0, 1)")
    for name in ("densification_interval", "iterations", "k", "spp"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be positive")
    if not 0.0 < cfg.t_term < 1.0:
        raise ConfigError("t_term must lie in (0, 1)")
    if cfg.max_triangles < 1:
        raise ConfigError("max_triangles must be positive")
