"""Flat key-value experiment configuration.

Config files are YAML documents restricted to one flat mapping whose keys
mirror the ExperimentConfig fields. Unknown keys are errors so typos fail
fast instead of silently running defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .training import METHODS, TrainConfig

PROTOCOLS = ("lfs", "lfh")
REGIMES = ("fixed", "growing")


@dataclass
class ExperimentConfig:
    """Everything one experiment needs: schedule, data, memory, model, training."""

    # schedule
    protocol: str = "lfs"
    phases: int = 5
    classes_total: int = 10
    class_order_seed: int = 1993
    lfh_n_includes_base: bool = False

    # data; empty data_dir generates the synthetic desk-scale dataset
    data_dir: str = ""
    image_size: int = 64
    flip_augment: bool = True
    synthetic_train_per_class: int = 100
    synthetic_test_per_class: int = 20
    synthetic_seed: int = 7

    # memory budget (original-image units; per-class quota under growing)
    memory_regime: str = "fixed"
    memory_budget: float = 200.0

    # model
    channels: tuple[int, ...] = (32, 64, 96, 128)
    block_depth: int = 1
    norm: str = "none"

    # training
    method: str = "bop"
    task_lr: float = 0.05
    inner_lr: float = 0.1
    outer_lr: float = 0.01
    mask_reg_weight: float = 0.1
    anticollapse_weight: float = 0.2
    phi_grad_clip: float = 1.0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs_phase1: int = 60
    epochs_later: int = 40
    batch_size: int = 32
    bilevel_batch_size: int = 16
    mask_threshold: float = 0.6
    downsample_ratio: float = 4.0
    distill_weight: float = 1.0
    distill_temperature: float = 2.0
    artifact_augment: bool = True
    last_block_only: bool = False

    # run
    seed: int = 0
    output_dir: str = "results"

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if self.memory_regime not in REGIMES:
            raise ConfigError(f"memory_regime must be one of {REGIMES}, got {self.memory_regime!r}")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.phases < 1 or self.classes_total < 1:
            raise ConfigError("phases and classes_total must be >= 1")
        if isinstance(self.channels, list):
            self.channels = tuple(self.channels)

    def train_config(self, seed: int | None = None) -> TrainConfig:
        fields = {f.name for f in dataclasses.fields(TrainConfig)}
        kwargs = {name: getattr(self, name) for name in fields if hasattr(self, name)}
        kwargs["seed"] = self.seed if seed is None else seed
        return TrainConfig(**kwargs)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["channels"] = list(self.channels)
        return out


def _coerce(name: str, value, target_type):
    if target_type is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"key {name!r} expects a boolean, got {value!r}")
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"key {name!r} expects an integer, got {value!r}")
        return value
    if target_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"key {name!r} expects a number, got {value!r}")
        return float(value)
    if target_type is str:
        if not isinstance(value, str):
            raise ConfigError(f"key {name!r} expects a string, got {value!r}")
        return value
    return value


def config_from_mapping(mapping: dict) -> ExperimentConfig:
    known = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(mapping) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    kwargs = {}
    for name, value in mapping.items():
        f = known[name]
        if name == "channels":
            if isinstance(value, str):
                value = [int(v) for v in value.replace(",", " ").split()]
            if not isinstance(value, (list, tuple)) or not value:
                raise ConfigError("channels expects a non-empty list of integers")
            kwargs[name] = tuple(int(v) for v in value)
        elif f.type in ("bool", "int", "float", "str"):
            kwargs[name] = _coerce(name, value, {"bool": bool, "int": int, "float": float, "str": str}[f.type])
        else:
            kwargs[name] = value
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a flat key-value mapping")
    for key, value in raw.items():
        if isinstance(value, dict):
            raise ConfigError(f"config {path} must be flat; key {key!r} holds a nested mapping")
    return config_from_mapping(raw)


def save_config(config: ExperimentConfig, path):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))
    tmp.replace(path)
