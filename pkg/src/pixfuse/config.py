"""Run configuration: JSON file with sections, defaults and named presets.

Schema (all keys optional; unknown keys rejected):

    {
      "preset": "desk" | "fullscale",
      "data":        {"dir": path | null, "synth": {"seed", "n", "size",
                      "cloud_fraction"}, "split_seed",
                      "split_fractions"},  # train / probe / eval groups
      "augment":     {"max_shift": int | null, "enable_flips": bool,
                      "mode": "shift" | "affine" | "photometric"},
      "cluster":     {"k_s2", "k_s1", "kmeans_max_iters", "kmeans_tol",
                      "kmeans_seed"},
      "pseudolabel": {"cap", "medium_marker_mode"},
      "network":     {"fusion_mode", "width_mult", "feature_dim", "proj_dim",
                      "modality"},
      "loss":        {"tau", "superpixels_per_tile", "slic_compactness",
                      "segment_overlap_min_frac", "negatives_scope",
                      "loss_weights"},
      "train":       {"pretrain": {...}, "linear": {...}, "selftrain1": {...},
                      "selftrain2": {...}},  # lr, weight_decay, batch_size,
                                             # epochs, optimizer, seed, ...
      "eval":        {"probe_scenes": int}
    }

The desk preset keeps every phase CPU-feasible; "fullscale" restores the
full-scale reference hyperparameters (batch 1000, 700 epochs, full width).
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .contrastive import LossConfig
from .errors import ConfigError
from .fusionnet import NetworkConfig
from .pipeline import PseudoLabelConfig, TrainConfig

DESK_DEFAULTS: dict = {
    "preset": "desk",
    "data": {
        "dir": None,
        "synth": {"seed": 7, "n": 64, "size": 64, "cloud_fraction": 0.0},
        "split_seed": 0,
        "split_fractions": [0.7, 0.1, 0.2],
    },
    "augment": {"max_shift": None, "enable_flips": True, "mode": "shift"},
    "cluster": {
        "k_s2": 8, "k_s1": 4,
        "kmeans_max_iters": 100, "kmeans_tol": 1e-4, "kmeans_seed": 0,
    },
    "pseudolabel": {"cap": 10, "medium_marker_mode": "strict"},
    "network": {
        "fusion_mode": "pixif", "width_mult": 0.25,
        "feature_dim": 256, "proj_dim": 128, "modality": "both",
    },
    "loss": {
        "tau": 0.1, "superpixels_per_tile": 64, "slic_compactness": 0.5,
        "segment_overlap_min_frac": 0.5, "negatives_scope": "batch",
        "loss_weights": {"pixel": 1.0, "global": 1.0, "global_concat": 1.0},
    },
    "train": {
        "pretrain": {
            "optimizer": "adam", "lr": 3e-4, "weight_decay": 4e-4,
            "momentum": 0.9, "batch_size": 16, "epochs": 50,
            "lr_schedule": "step", "seed": 0, "checkpoint_interval": 0,
        },
        "linear": {
            "optimizer": "sgd", "lr": 0.05, "weight_decay": 0.0,
            "momentum": 0.9, "batch_size": 8, "epochs": 20,
            "lr_schedule": "constant", "seed": 0,
        },
        "selftrain1": {
            "optimizer": "adam", "lr": 3e-4, "weight_decay": 0.0,
            "momentum": 0.9, "batch_size": 8, "epochs": 30,
            "lr_schedule": "constant", "seed": 0, "encoder_lr": 1e-4,
        },
        "selftrain2": {
            "optimizer": "adam", "lr": 1e-4, "weight_decay": 0.0,
            "momentum": 0.9, "batch_size": 8, "epochs": 10,
            "lr_schedule": "constant", "seed": 0, "finetune_lr": 1e-4,
        },
    },
    "eval": {"probe_scenes": 20},
}

# full-scale reference hyperparameters; width 1.0 restores 256-channel features
FULLSCALE_OVERRIDES: dict = {
    "preset": "fullscale",
    "network": {"width_mult": 1.0},
    "train": {
        "pretrain": {"batch_size": 1000, "epochs": 700},
        "linear": {"epochs": 50},
        "selftrain1": {"batch_size": 50, "epochs": 100},
        "selftrain2": {"batch_size": 50, "epochs": 100},
    },
}


def _deep_merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _deep_merge(base[key], value, where)
        else:
            out[key] = value
    return out


def default_config(preset: str = "desk") -> dict:
    if preset == "desk":
        return copy.deepcopy(DESK_DEFAULTS)
    if preset == "fullscale":
        return _deep_merge(DESK_DEFAULTS, FULLSCALE_OVERRIDES)
    raise ConfigError(f"unknown preset {preset!r}")


def load_config(path: str | Path | None) -> dict:
    if path is None:
        return default_config()
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    base = default_config(raw.get("preset", "desk"))
    return _deep_merge(base, raw)


def network_config(cfg: dict, fusion_mode: str | None = None,
                   modality: str | None = None) -> NetworkConfig:
    net = cfg["network"]
    return NetworkConfig(
        fusion_mode=fusion_mode or net["fusion_mode"],
        width_mult=net["width_mult"],
        feature_dim=net["feature_dim"],
        proj_dim=net["proj_dim"],
        modality=modality or net["modality"],
    )


def loss_config(cfg: dict) -> LossConfig:
    lc = cfg["loss"]
    return LossConfig(
        tau=lc["tau"],
        superpixels_per_tile=lc["superpixels_per_tile"],
        slic_compactness=lc["slic_compactness"],
        segment_overlap_min_frac=lc["segment_overlap_min_frac"],
        negatives_scope=lc["negatives_scope"],
        weights=dict(lc["loss_weights"]),
    )


def train_config(cfg: dict, phase: str, seed: int | None = None,
                 epochs: int | None = None) -> TrainConfig:
    key = {"pretrain": "pretrain", "linear": "linear",
           "selftrain1": "selftrain1", "selftrain2-finetune": "selftrain2"}[phase]
    section = dict(cfg["train"][key])
    if seed is not None:
        section["seed"] = seed
    if epochs is not None:
        section["epochs"] = epochs
    aug = cfg["augment"]
    return TrainConfig(
        phase=phase,
        max_shift=aug["max_shift"],
        enable_flips=aug["enable_flips"],
        augment_mode=aug["mode"],
        **section,
    )


def pseudo_config(cfg: dict) -> PseudoLabelConfig:
    cl, pl = cfg["cluster"], cfg["pseudolabel"]
    return PseudoLabelConfig(
        k_s2=cl["k_s2"], k_s1=cl["k_s1"],
        kmeans_max_iters=cl["kmeans_max_iters"], kmeans_tol=cl["kmeans_tol"],
        kmeans_seed=cl["kmeans_seed"],
        cap=pl["cap"], medium_marker_mode=pl["medium_marker_mode"],
    )
