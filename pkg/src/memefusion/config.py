"""Run configuration: one JSON document, dotted-key overrides, stable hash.

Configs are plain nested dicts so they serialize losslessly into checkpoint
manifests and reports. ``resolve_config`` fills the scale-dependent defaults
(projection dim, batch size) from the backbone kind, after which the config
is "effective": its canonical-JSON sha256 is the hash embedded in every
artifact the run produces.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path

from .errors import ConfigError

DEFAULTS = {
    "backbone": {
        "kind": "mock",          # mock | pretrained
        "source": None,           # weight archive dir for pretrained
        "seed": 0,                # mock weight seed
    },
    "phi": {
        "kind": "mock",          # mock | pretrained
        "source": None,
        "seed": 0,
    },
    "data": {
        "source": "synthetic",   # synthetic | hmc | harmeme
        "root": None,
        "n_synthetic": 1024,
        "synthetic_seed": 0,
        "selection_split": None,  # default depends on source
    },
    "model": {
        "p": None,                # projection dim; 16 mock / 1024 pretrained
        "h": None,                # combiner dim; defaults to p
        "phi_proj_placement": "input",
        "combiner_activation": "relu",
        "head_dropout": 0.1,
        "interaction_hidden": 64,
        "prompt_prefix": "a photo of",
        "prompt_separator": ", ",
    },
    "train": {
        "lr": 1e-4,
        "weight_decay": 1e-4,
        "batch_size": None,       # 16 mock / 64 pretrained
        "stage1_epochs": 10,
        "stage2_epochs": 20,
        "seed": None,             # falls back to MEMEFUSION_SEED, then 0
        "finetune_visual_proj": False,
    },
    "ablation": {
        "use_combiner": True,
        "use_two_stage": True,
        "use_textual_inversion": True,
    },
}

_ENUMS = {
    "backbone.kind": ("mock", "pretrained"),
    "phi.kind": ("mock", "pretrained"),
    "data.source": ("synthetic", "hmc", "harmeme"),
    "model.phi_proj_placement": ("input", "output"),
}


def default_config() -> dict:
    return copy.deepcopy(DEFAULTS)


def _merge(base: dict, update: dict, path: str = "") -> dict:
    for key, value in update.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(here, "unknown config key")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(here, f"expected an object, got {type(value).__name__}")
            _merge(base[key], value, here)
        else:
            base[key] = value
    return base


def load_config(path=None, overrides=()) -> dict:
    """Config file merged over defaults, then dotted-key overrides applied."""
    config = default_config()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError("config", f"config file not found: {path}")
        try:
            with open(path, "r", encoding="utf-8") as fh:
                loaded = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"invalid JSON in {path}: {exc.msg} (line {exc.lineno})")
        if not isinstance(loaded, dict):
            raise ConfigError("config", "top-level config must be a JSON object")
        _merge(config, loaded)
    return apply_overrides(config, overrides)


def apply_overrides(config: dict, overrides) -> dict:
    """Apply ``section.key=value`` pairs; values parse as JSON, else strings."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like section.key=value")
        dotted, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = config
        parts = dotted.split(".")
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(dotted, "unknown config key")
            node = node[part]
        leaf = parts[-1]
        if not isinstance(node, dict) or leaf not in node:
            raise ConfigError(dotted, "unknown config key")
        if isinstance(node[leaf], dict):
            raise ConfigError(dotted, "cannot override a whole section")
        node[leaf] = value
    return config


def resolve_config(config: dict) -> dict:
    """Fill scale-dependent defaults and validate; returns the effective config."""
    cfg = copy.deepcopy(config)
    for dotted, allowed in _ENUMS.items():
        value = get_path(cfg, dotted)
        if value not in allowed:
            raise ConfigError(dotted, f"must be one of {allowed}, got {value!r}")
    mock = cfg["backbone"]["kind"] == "mock"
    if cfg["train"]["seed"] is None:
        env = os.environ.get("MEMEFUSION_SEED")
        try:
            cfg["train"]["seed"] = int(env) if env is not None else 0
        except ValueError:
            raise ConfigError("train.seed", f"MEMEFUSION_SEED={env!r} is not an integer") from None
    if cfg["model"]["p"] is None:
        cfg["model"]["p"] = 16 if mock else 1024
    if cfg["model"]["h"] is None:
        cfg["model"]["h"] = cfg["model"]["p"]
    if cfg["train"]["batch_size"] is None:
        cfg["train"]["batch_size"] = 16 if mock else 64
    if cfg["backbone"]["kind"] == "pretrained" and cfg["backbone"]["source"] is None:
        raise ConfigError("backbone.source", "required when backbone.kind is 'pretrained'")
    if cfg["phi"]["kind"] == "pretrained" and cfg["phi"]["source"] is None:
        raise ConfigError("phi.source", "required when phi.kind is 'pretrained'")
    for dotted in ("model.p", "model.h", "train.batch_size", "train.stage1_epochs",
                   "train.stage2_epochs"):
        value = get_path(cfg, dotted)
        if not isinstance(value, int) or value <= 0:
            raise ConfigError(dotted, f"must be a positive integer, got {value!r}")
    for dotted in ("train.lr", "train.weight_decay", "model.head_dropout"):
        value = get_path(cfg, dotted)
        if not isinstance(value, (int, float)) or value < 0:
            raise ConfigError(dotted, f"must be a nonnegative number, got {value!r}")
    for dotted in ("ablation.use_combiner", "ablation.use_two_stage",
                   "ablation.use_textual_inversion", "train.finetune_visual_proj"):
        value = get_path(cfg, dotted)
        if not isinstance(value, bool):
            raise ConfigError(dotted, f"must be true or false, got {value!r}")
    return cfg


def get_path(config: dict, dotted: str):
    node = config
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(dotted, "unknown config key")
        node = node[part]
    return node


def canonical_json(config: dict) -> str:
    return json.dumps(config, sort_keys=True, separators=(",", ":"))


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def cache_dir() -> Path:
    """Weight/download cache; override with MEMEFUSION_CACHE."""
    env = os.environ.get("MEMEFUSION_CACHE")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "memefusion"
