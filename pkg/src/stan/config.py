"""Run configuration: JSON document, schema-validated with typo guard.

Unknown keys anywhere in the document are rejected; omitted keys fall
back to the defaults below (which hold the published optimizer settings:
AdamW wd 0.01 / lr 5e-5 for the backbone, SGD wd 1e-4 / lr 1e-3 for the
rest).
"""

from __future__ import annotations

import copy
import hashlib
import json

import numpy as np

from .backbone import BackboneConfig
from .errors import ConfigError, IoError
from .model import AGG_MODES, StanModel
from .sfso import SfsoConfig

DEFAULTS = {
    "seed": 0,
    "backbone": {
        "image_size": 32,
        "patch_size": 4,
        "stage_channels": [16, 32, 64, 128],
        "stage_depths": [1, 1, 2, 1],
        "window_size": 2,
        "num_heads": [1, 2, 4, 4],
        "num_classes": 4,
        "shifted_windows": False,
    },
    "sfso": {"common_channels": None, "common_side": None, "kernel": 1},
    "stfl": {"hidden_size": None, "aggregation_mode": "stan", "reverse_moments": False},
    "ca": {
        "enabled": True,
        "hidden_size": None,
        "scan_order": "row_major",
        "freeze_init_states": False,
    },
    "loss": {"lambda": 1.0},
    "optimizer": {
        "backbone": {
            "algo": "adamw",
            "lr": 5e-5,
            "weight_decay": 0.01,
            "betas": [0.9, 0.999],
            "eps": 1e-8,
        },
        "rest": {"algo": "sgd", "lr": 1e-3, "weight_decay": 1e-4, "momentum": 0.9},
        "epochs": 60,
        "batch_size": 8,
        "lr_schedule": "constant",
    },
    "data": {"manifest": None, "synthetic": None},
    "eval": {"target_tpr": 0.95},
}


def _merge(user, default, path: str):
    if isinstance(default, dict):
        if not isinstance(user, dict):
            raise ConfigError(f"{path or 'config'}: expected an object")
        unknown = set(user) - set(default)
        if unknown:
            raise ConfigError(f"unknown config key(s) at {path or 'top level'}: {sorted(unknown)}")
        out = {}
        for key, dval in default.items():
            if key in user:
                # data.synthetic and data.manifest are free-form / validated later
                if path == "data" or (isinstance(dval, dict) and user[key] is None):
                    out[key] = copy.deepcopy(user[key])
                else:
                    out[key] = _merge(user[key], dval, f"{path}.{key}" if path else key)
            else:
                out[key] = copy.deepcopy(dval)
        return out
    return copy.deepcopy(user)


def resolve_config(user: dict) -> dict:
    """Merge a user document over the defaults, rejecting unknown keys."""
    cfg = _merge(user, DEFAULTS, "")
    if cfg["loss"]["lambda"] < 0:
        raise ConfigError("loss.lambda must be non-negative")
    if cfg["stfl"]["aggregation_mode"] not in AGG_MODES:
        raise ConfigError(f"stfl.aggregation_mode must be one of {AGG_MODES}")
    opt = cfg["optimizer"]
    if opt["epochs"] < 0 or opt["batch_size"] < 1:
        raise ConfigError("optimizer.epochs must be >= 0 and batch_size >= 1")
    for group in ("backbone", "rest"):
        if opt[group]["lr"] < 0 or opt[group]["weight_decay"] < 0:
            raise ConfigError(f"optimizer.{group}: negative rate or decay")
    if not 0.0 < cfg["eval"]["target_tpr"] <= 1.0:
        raise ConfigError("eval.target_tpr must be in (0, 1]")
    return cfg


def load_config(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from e
    return resolve_config(doc)


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def build_model(cfg: dict, rng: np.random.Generator | None = None) -> StanModel:
    bcfg = BackboneConfig(**cfg["backbone"])
    scfg = SfsoConfig(**cfg["sfso"])
    if rng is None:
        rng = np.random.default_rng(cfg["seed"])
    return StanModel(
        backbone_cfg=bcfg,
        sfso_cfg=scfg,
        stfl_hidden=cfg["stfl"]["hidden_size"],
        aggregation_mode=cfg["stfl"]["aggregation_mode"],
        reverse_moments=cfg["stfl"]["reverse_moments"],
        ca_enabled=cfg["ca"]["enabled"],
        ca_hidden=cfg["ca"]["hidden_size"],
        ca_scan_order=cfg["ca"]["scan_order"],
        ca_freeze_init_states=cfg["ca"]["freeze_init_states"],
        rng=rng,
    )
