"""Run configuration: defaults, TOML loading, validation, stable hashing.

The config hash is a sha256 over the canonical JSON form of every setting
except the seed, so runs that differ only by seed share a hash and the run
id combines both: ``<hash12>-s<seed>``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from .datagen import FilterThresholds
from .dpo import DpoHyper
from .errors import ConfigError
from .geometry import DiversityParams
from .world import WorldConfig


@dataclass(frozen=True)
class TrainConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    dpo: DpoHyper = field(default_factory=DpoHyper)
    diversity: DiversityParams = field(default_factory=DiversityParams)
    thresholds: FilterThresholds = field(default_factory=FilterThresholds)

    bins: int = 16
    hidden: int = 64
    init_scale: float = 0.05
    temperature: float = 1.0

    rounds: int = 4
    focus_rho: float = 4.0

    sft_size: int = 500
    rl_size: int = 5000
    eval_size: int = 1000

    sft_epochs: int = 120
    sft_lr: float = 0.2
    sft_batch: int = 32
    stage1_epochs: int = 3
    stage1_lr: float = 0.01
    stage2_epochs: int = 3
    stage2_lr: float = 0.01
    rl_batch: int = 32
    baseline_epochs: int = 3
    baseline_lr: float = 0.01
    grad_clip: float = 10.0
    iterations: int = 3

    detection_iou: float = 0.5
    seed: int = 42

    def __post_init__(self):
        for name in ("sft_size", "rl_size", "eval_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("sft_epochs", "stage1_epochs", "stage2_epochs", "baseline_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("sft_lr", "stage1_lr", "stage2_lr", "baseline_lr", "grad_clip", "temperature"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        for name in ("sft_batch", "rl_batch", "rounds"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.bins < 4:
            raise ValueError("bins must be at least 4")
        if self.hidden < 1:
            raise ValueError("hidden must be positive")
        if self.init_scale <= 0.0:
            raise ValueError("init_scale must be positive")
        if self.focus_rho <= 0.0:
            raise ValueError("focus_rho must be positive")
        if not 0.0 < self.detection_iou < 1.0:
            raise ValueError("detection_iou must be in (0, 1)")


def _dataclass_dict(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def config_as_dict(cfg: TrainConfig) -> dict:
    """Nested plain-type view, suitable for hashing and report echoes."""
    out = {}
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if f.name in ("world", "dpo", "diversity", "thresholds"):
            out[f.name] = _dataclass_dict(value)
        else:
            out[f.name] = value
    return out


def config_hash(cfg: TrainConfig) -> str:
    """sha256 hex digest of the canonical config JSON, seed excluded."""
    payload = config_as_dict(cfg)
    payload.pop("seed")
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def run_id(cfg: TrainConfig) -> str:
    return f"{config_hash(cfg)[:12]}-s{cfg.seed}"


_SECTION_TYPES = {
    "world": WorldConfig,
    "dpo": DpoHyper,
    "diversity": DiversityParams,
    "thresholds": FilterThresholds,
}

# Flat keys grouped into TOML tables purely for readability.
_SECTION_FLAT = {
    "policy": ("bins", "hidden", "init_scale", "temperature"),
    "data": ("rounds", "focus_rho"),
    "pools": ("sft_size", "rl_size", "eval_size"),
    "train": (
        "sft_epochs",
        "sft_lr",
        "sft_batch",
        "stage1_epochs",
        "stage1_lr",
        "stage2_epochs",
        "stage2_lr",
        "rl_batch",
        "baseline_epochs",
        "baseline_lr",
        "grad_clip",
        "iterations",
    ),
    "eval": ("detection_iou",),
}


def load_config(path=None, seed_override=None) -> TrainConfig:
    """Build a TrainConfig from an optional TOML file.

    Unknown tables or keys are rejected rather than ignored, so typos fail
    loudly.  ``seed_override`` wins over both the file and the default.
    """
    raw = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    kwargs = {}
    try:
        for section, names in list(raw.items()):
            if section == "seed":
                kwargs["seed"] = int(names)
                continue
            if section in _SECTION_TYPES:
                if not isinstance(names, dict):
                    raise ConfigError(f"[{section}] must be a table")
                kwargs[section] = _SECTION_TYPES[section](**names)
            elif section in _SECTION_FLAT:
                if not isinstance(names, dict):
                    raise ConfigError(f"[{section}] must be a table")
                for key, value in names.items():
                    if key not in _SECTION_FLAT[section]:
                        raise ConfigError(f"unknown key {key!r} in [{section}]")
                    kwargs[key] = value
            else:
                raise ConfigError(f"unknown config table {section!r}")
        if seed_override is not None:
            kwargs["seed"] = int(seed_override)
        return TrainConfig(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
