"""Run configuration: one strict JSON document drives train/cv/predict runs.

Unknown keys are rejected at every level and types are checked before any
compute starts, so a typo in a long-running experiment config dies in
milliseconds, not hours. The same document is echoed verbatim into the
checkpoint manifest for provenance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

from .model import ModelConfig

__all__ = ["ConfigError", "RunConfig", "DataSection", "RebalanceSpec",
           "TrainingSection", "parse_run_config", "load_run_config"]


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""


def _check_keys(doc: dict, where: str, required: dict, optional: dict) -> None:
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object, got {type(doc).__name__}")
    allowed = {**required, **optional}
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}; allowed: {sorted(allowed)}")
    missing = sorted(set(required) - set(doc))
    if missing:
        raise ConfigError(f"{where}: missing required keys {missing}")
    for key, value in doc.items():
        want = allowed[key]
        if want is float:
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        elif want is int:
            ok = isinstance(value, int) and not isinstance(value, bool)
        else:
            ok = isinstance(value, want)
        if not ok:
            raise ConfigError(
                f"{where}.{key}: expected {getattr(want, '__name__', want)}, "
                f"got {type(value).__name__}")


def _int_quad(doc: dict, where: str, key: str, default: tuple) -> tuple:
    if key not in doc:
        return default
    v = doc[key]
    if (not isinstance(v, list) or len(v) != 4
            or any(not isinstance(i, int) or isinstance(i, bool) for i in v)):
        raise ConfigError(f"{where}.{key}: expected a list of 4 integers, got {v!r}")
    return tuple(v)


@dataclass(frozen=True)
class RebalanceSpec:
    class_id: int
    n_pixels: int
    seed: int


@dataclass(frozen=True)
class DataSection:
    bands: int
    n_patches: int
    train_fraction: float
    cube: Optional[str] = None
    labels: Optional[str] = None
    rebalance: Optional[RebalanceSpec] = None


@dataclass(frozen=True)
class TrainingSection:
    batch_size: int
    epochs: int
    learning_rate: float = 0.01
    momentum: float = 0.0


@dataclass(frozen=True)
class RunConfig:
    seed: int
    data: DataSection
    model: ModelConfig
    training: TrainingSection
    output_dir: Optional[str] = None
    name: Optional[str] = None
    document: Optional[dict] = None


def parse_run_config(doc: dict) -> RunConfig:
    _check_keys(doc, "config",
                required={"seed": int, "data": dict, "model": dict, "training": dict},
                optional={"output_dir": str, "name": str})

    d = doc["data"]
    _check_keys(d, "config.data",
                required={"bands": int, "n_patches": int, "train_fraction": float},
                optional={"cube": str, "labels": str, "rebalance": dict})
    if d["bands"] < 1:
        raise ConfigError("config.data.bands must be >= 1")
    if d["n_patches"] < 1:
        raise ConfigError("config.data.n_patches must be >= 1")
    if not 0.0 < d["train_fraction"] <= 1.0:
        raise ConfigError("config.data.train_fraction must be in (0, 1]")
    rebalance = None
    if "rebalance" in d:
        r = d["rebalance"]
        _check_keys(r, "config.data.rebalance",
                    required={"class_id": int, "n_pixels": int, "seed": int},
                    optional={})
        if r["class_id"] < 1:
            raise ConfigError("config.data.rebalance.class_id must be >= 1")
        if r["n_pixels"] < 0:
            raise ConfigError("config.data.rebalance.n_pixels must be >= 0")
        rebalance = RebalanceSpec(r["class_id"], r["n_pixels"], r["seed"])
    if ("cube" in d) != ("labels" in d):
        raise ConfigError("config.data: cube and labels must be given together")
    data = DataSection(
        bands=d["bands"], n_patches=d["n_patches"],
        train_fraction=float(d["train_fraction"]),
        cube=d.get("cube"), labels=d.get("labels"), rebalance=rebalance)

    m = doc["model"]
    _check_keys(m, "config.model",
                required={"n_classes": int},
                optional={"channels": list, "blocks": list, "heads": list,
                          "reductions": list, "expansion": int,
                          "decoder_channels": int, "schedule": str})
    defaults = ModelConfig(n_classes=m["n_classes"])
    try:
        model = ModelConfig(
            channels=_int_quad(m, "config.model", "channels", defaults.channels),
            blocks=_int_quad(m, "config.model", "blocks", defaults.blocks),
            heads=_int_quad(m, "config.model", "heads", defaults.heads),
            reductions=_int_quad(m, "config.model", "reductions", defaults.reductions),
            expansion=m.get("expansion", defaults.expansion),
            decoder_channels=m.get("decoder_channels", defaults.decoder_channels),
            n_classes=m["n_classes"],
            schedule=m.get("schedule", defaults.schedule),
        )
    except ValueError as e:
        raise ConfigError(f"config.model: {e}") from e
    if model.n_classes < 2:
        raise ConfigError("config.model.n_classes must be >= 2")

    t = doc["training"]
    _check_keys(t, "config.training",
                required={"batch_size": int, "epochs": int},
                optional={"learning_rate": float, "momentum": float})
    training = TrainingSection(
        batch_size=t["batch_size"], epochs=t["epochs"],
        learning_rate=float(t.get("learning_rate", 0.01)),
        momentum=float(t.get("momentum", 0.0)))
    if training.batch_size < 1:
        raise ConfigError("config.training.batch_size must be >= 1")
    if training.epochs < 1:
        raise ConfigError("config.training.epochs must be >= 1")
    if training.learning_rate <= 0:
        raise ConfigError("config.training.learning_rate must be > 0")

    return RunConfig(
        seed=doc["seed"], data=data, model=model, training=training,
        output_dir=doc.get("output_dir"), name=doc.get("name"), document=doc)


def load_run_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from e
    try:
        return parse_run_config(doc)
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}") from e
