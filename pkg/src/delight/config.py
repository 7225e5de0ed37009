"""Run configuration: nested sections, two profiles, strict loading.

A config file is YAML with any subset of the sections below. Values not
given fall back to the selected profile (``full`` or ``desk``); unknown
keys are rejected. ``canonical`` gives the stable serialized form stored
in checkpoints.
"""
from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError

CONFIG_ENV = "DELIGHT_CONFIG"


@dataclass
class DataConfig:
    low_dir: str = ""
    normal_dir: str = ""
    test_low_dir: str = ""
    test_normal_dir: str = ""
    resize: str = "none"          # none | pad8 | long_side
    long_side: int = 1008
    val_fraction: float = 0.1


@dataclass
class Stage1Config:
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    epochs_flat: int = 100
    epochs_decay: int = 100
    iters_per_epoch: int = 0      # 0: one pass over the low-light train split
    batch_size: int = 32
    crop: int = 320
    n_local_patches: int = 5
    patch_size: int = 32
    base_channels: int = 32
    disc_channels: int = 64
    perceptual_layers: list = field(default_factory=lambda: ["relu4_4"])
    hflip: bool = True
    val_every: int = 1            # epochs between validation passes
    selection: str = "val_loss"   # val_loss | psnr | last


@dataclass
class Stage2Config:
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    epochs: int = 2000
    iters_per_epoch: int = 0
    batch_size: int = 8
    crop: int = 128
    base_channels: int = 32
    n_res_blocks: int = 6
    full_resolution: bool = False  # stride-1 encoder, no decoder upsampling
    residual_output: bool = False  # predict a logit-space correction to the enhanced input
    disc_channels: int = 64
    hflip: bool = True
    rot90: bool = True
    val_every: int = 50
    selection: str = "val_loss"


@dataclass
class FeaturesConfig:
    kind: str = "reference"       # reference | test
    weights_path: str = ""
    sha256: str = ""
    width_divisor: int = 1        # test extractor only
    seed: int = 0
    layers: list = field(default_factory=lambda: ["relu1_2", "relu2_2", "relu3_2", "relu4_4", "relu5_4"])


@dataclass
class LossesConfig:
    lambda_color: float = 10.0
    lambda_adapt: float = 1.0
    lambda_con: float = 1.0
    gamma_p: float = 10.0
    gamma_c: float = 10.0
    color_loss: str = "angle"     # angle | one_minus_cos
    color_factor: int = 4
    gamma_formula: str = "corrected"   # corrected | reciprocal
    gamma_min: float = 1.0
    gamma_max: float = 10.0
    mean_clamp: float = 1e-3
    eps_s: float = 0.01


@dataclass
class EvalConfig:
    report_name: str = "eval.csv"


@dataclass
class RuntimeConfig:
    seed: int = 0
    profile: str = "full"
    device: str = "cpu"
    workers: int = 1
    log_wall_time: bool = True


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    features: FeaturesConfig = field(default_factory=FeaturesConfig)
    losses: LossesConfig = field(default_factory=LossesConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)

    def to_dict(self):
        return asdict(self)

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


# CPU-sized overrides: narrow networks, small crops, short schedules
# desk val splits hold a couple of images, too few for val-loss model selection
DESK_OVERRIDES = {
    "stage1": {"epochs_flat": 25, "epochs_decay": 25, "iters_per_epoch": 4, "batch_size": 4, "crop": 64,
               "n_local_patches": 5, "patch_size": 32, "base_channels": 8, "disc_channels": 8,
               "perceptual_layers": ["relu4_4"], "val_every": 5, "selection": "last"},
    "stage2": {"epochs": 50, "iters_per_epoch": 10, "batch_size": 4, "crop": 64, "base_channels": 8,
               "n_res_blocks": 6, "full_resolution": True, "residual_output": True, "disc_channels": 8,
               "val_every": 10, "selection": "last"},
    "features": {"kind": "test", "width_divisor": 8},
    "runtime": {"profile": "desk"},
}

_SECTIONS = {f.name: f.type for f in fields(Config)}


def _merge(cfg: Config, overrides: dict, source: str):
    for section, values in overrides.items():
        if section not in _SECTIONS:
            raise ConfigError(f"{source}: unknown config section {section!r}")
        if values is None:
            continue
        if not isinstance(values, dict):
            raise ConfigError(f"{source}: section {section!r} must be a mapping")
        target = getattr(cfg, section)
        known = {f.name: f for f in fields(target)}
        for key, value in values.items():
            if key not in known:
                raise ConfigError(f"{source}: unknown key {section}.{key}")
            default = getattr(target, key)
            setattr(target, key, _coerce(value, default, f"{section}.{key}", source))


def _coerce(value, default, name, source):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{source}: {name} must be true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(value, bool) and isinstance(value, int):
        return value
    if isinstance(default, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, str) and isinstance(value, str):
        return value
    if isinstance(default, list) and isinstance(value, list):
        return list(value)
    raise ConfigError(f"{source}: {name} has the wrong type ({type(value).__name__})")


def make_config(profile="full", overrides=None) -> Config:
    if profile not in ("full", "desk"):
        raise ConfigError(f"unknown profile {profile!r} (expected 'full' or 'desk')")
    cfg = Config()
    if profile == "desk":
        _merge(cfg, copy.deepcopy(DESK_OVERRIDES), "desk profile")
    if overrides:
        _merge(cfg, overrides, "overrides")
    validate(cfg)
    return cfg


def load_config(path=None, profile=None, overrides=None) -> Config:
    """Read a YAML config; relative data paths resolve against the file's directory.

    The profile comes from ``profile`` if given, else from the file's
    ``runtime.profile``, else ``full``.
    """
    if path is None:
        path = os.environ.get(CONFIG_ENV) or None
    doc = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            doc = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {p}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config {p} must be a mapping of sections")
        data = doc.get("data") or {}
        for key in ("low_dir", "normal_dir", "test_low_dir", "test_normal_dir"):
            if data.get(key) and not Path(data[key]).is_absolute():
                data[key] = str((p.parent / data[key]).resolve())
    chosen = profile or (doc.get("runtime") or {}).get("profile") or "full"
    cfg = make_config(chosen)
    _merge(cfg, doc, str(path))
    if overrides:
        _merge(cfg, overrides, "overrides")
    cfg.runtime.profile = chosen
    validate(cfg)
    return cfg


def config_from_dict(doc: dict) -> Config:
    cfg = Config()
    _merge(cfg, doc, "checkpoint")
    return cfg


def validate(cfg: Config):
    if cfg.stage1.crop % 8:
        raise ConfigError(f"stage1.crop must be divisible by 8, got {cfg.stage1.crop}")
    if cfg.stage2.crop % 4:
        raise ConfigError(f"stage2.crop must be divisible by 4, got {cfg.stage2.crop}")
    if cfg.stage1.lr <= 0 or cfg.stage2.lr <= 0:
        raise ConfigError("learning rates must be positive")
    if not 0.0 <= cfg.data.val_fraction < 1.0:
        raise ConfigError("data.val_fraction must be in [0, 1)")
    if cfg.losses.color_loss not in ("angle", "one_minus_cos"):
        raise ConfigError("losses.color_loss must be 'angle' or 'one_minus_cos'")
    if cfg.losses.gamma_formula not in ("corrected", "reciprocal"):
        raise ConfigError("losses.gamma_formula must be 'corrected' or 'reciprocal'")
    if cfg.features.kind not in ("reference", "test"):
        raise ConfigError("features.kind must be 'reference' or 'test'")
    for section in (cfg.stage1, cfg.stage2):
        if section.selection not in ("val_loss", "psnr", "last"):
            raise ConfigError(f"unknown model selection {section.selection!r}")
    if cfg.runtime.workers < 1:
        raise ConfigError("runtime.workers must be >= 1")
