"""Run configuration: one JSON document for the whole pipeline.

Schema (all sections and keys optional; defaults shown in docs/config.md):

    model   -> ModelConfig fields
    train   -> epochs, batch_size, lr, seed, precision
    phantom -> PhantomConfig fields
    split   -> ratio, seed
    solver  -> lam, max_iters, tolerance  (exact rank-pooling solver)
    paths   -> out_dir, manifest, checkpoint

Unknown keys anywhere are rejected before any work happens.
"""

from __future__ import annotations

import json
from pathlib import Path

from .data import PhantomConfig
from .errors import ConfigError
from .models import ModelConfig
from .optim import TrainConfig
from .rankpool import RankSolverConfig

_SCHEMA = {
    "model": {
        "variant": str,
        "backbone": str,
        "use_cbam": bool,
        "head": str,
        "fusion": str,
        "chunk_k": int,
        "preset": str,
        "input_dims": list,
    },
    "train": {
        "epochs": int,
        "batch_size": int,
        "lr": float,
        "seed": int,
        "precision": str,
    },
    "phantom": {
        "count_per_class": int,
        "dims": list,
        "cavity_radius_nc": list,
        "cavity_radius_ad": list,
        "noise_sigma": float,
        "seed": int,
    },
    "split": {"ratio": float, "seed": int},
    "solver": {"lam": float, "max_iters": int, "tolerance": float},
    "paths": {"out_dir": str, "manifest": str, "checkpoint": str},
}

_DEFAULTS = {
    "model": ModelConfig().to_dict(),
    "train": {"epochs": 150, "batch_size": 16, "lr": 1e-4, "seed": 0,
              "precision": "float32"},
    "phantom": PhantomConfig().to_dict(),
    "split": {"ratio": 0.8, "seed": 0},
    "solver": {"lam": 1.0, "max_iters": 2000, "tolerance": 1e-6},
    "paths": {},
}


def _type_ok(value, expected) -> bool:
    if expected is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if expected is int:
        return isinstance(value, int) and not isinstance(value, bool)
    return isinstance(value, expected)


def validate_run_config(doc: dict) -> dict:
    """Merge ``doc`` over the defaults; reject unknown keys and bad types."""
    if not isinstance(doc, dict):
        raise ConfigError("run config must be a JSON object")
    merged = {section: dict(values) for section, values in _DEFAULTS.items()}
    for section, values in doc.items():
        if section not in _SCHEMA:
            raise ConfigError(
                f"unknown config section {section!r}; expected one of {sorted(_SCHEMA)}"
            )
        if not isinstance(values, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        for key, value in values.items():
            if key not in _SCHEMA[section]:
                raise ConfigError(
                    f"unknown key {section}.{key}; expected one of "
                    f"{sorted(_SCHEMA[section])}"
                )
            if not _type_ok(value, _SCHEMA[section][key]):
                raise ConfigError(
                    f"{section}.{key} must be {_SCHEMA[section][key].__name__}, "
                    f"got {type(value).__name__}"
                )
            merged[section][key] = value
    return merged


def load_run_config(path=None) -> dict:
    if path is None:
        return validate_run_config({})
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    return validate_run_config(doc)


def model_config(cfg: dict) -> ModelConfig:
    try:
        return ModelConfig.from_dict(cfg["model"])
    except TypeError as e:
        raise ConfigError(f"bad model config: {e}") from e


def train_config(cfg: dict, model: ModelConfig | None = None) -> TrainConfig:
    t = cfg["train"]
    model = model if model is not None else model_config(cfg)
    batch = t["batch_size"]
    if model.variant == "conv3d_baseline":
        batch = min(batch, 8)  # 3D baseline is memory-bound at full scale
    try:
        return TrainConfig(epochs=t["epochs"], batch_size=batch, lr=t["lr"],
                           seed=t["seed"], precision=t["precision"], model=model)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def phantom_config(cfg: dict) -> PhantomConfig:
    return PhantomConfig(**cfg["phantom"])


def solver_config(cfg: dict) -> RankSolverConfig:
    s = cfg["solver"]
    try:
        return RankSolverConfig(lam=s["lam"], max_iters=s["max_iters"],
                                tolerance=s["tolerance"])
    except ValueError as e:
        raise ConfigError(str(e)) from e
