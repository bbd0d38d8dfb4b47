#!/usr/bin/env python3
"""
Settings management for the tubule segmentation toolkit.

Configuration is layered, later layers winning:
1. DEFAULT_SETTINGS below (alpha=0.1, p=2, r=2, th=0.5,
   stride=64, kappa=8, sigma=100, lr=3e-3, ...)
2. config.yaml next to this module
3. config.local.yaml next to this module (local overrides, not committed)
4. the YAML file named by the TUBULE_CONFIG environment variable
5. environment variables (LOG_LEVEL, LOG_FILE, TUBULE_THREADS, TUBULE_SEED),
   optionally loaded from a .env file

Command-line flags override the merged result per invocation.
"""

import copy
import logging
import os
from pathlib import Path
from typing import Any, Optional

import yaml

# Load environment variables from .env file (if present and readable)
try:
    from dotenv import load_dotenv
    load_dotenv()
except (ImportError, PermissionError, OSError):
    pass

logger = logging.getLogger("tubule_seg.settings")


# Default settings
DEFAULT_SETTINGS: dict = {
    "model": {
        "task": "airway",                      # airway, artery-vein
        "channels": [16, 32, 64, 128, 256],    # full-scale ladder; toy: [4, 8, 16, 32, 64]
        "r": 2,
        "p": 2.0,
        "alpha": 0.1,
        "patch_size": [80, 192, 304],
        "use_coordinate_map": True,
        "use_aux_vessel_head": True,
        "use_distillation": True,
        "recalibration": "fr",                 # fr, pe, cse, none
        "attention_mapping": "sum",            # sum, max, mean
        "pooling": "max",                      # max, avg
    },
    "train": {
        "lr": 3e-3,
        "plateau_patience": 10,
        "lr_factor": 0.1,
        "batch_size": 1,
        "epochs": 60,
        "seed": 0,
    },
    "augment": {
        "flip_prob": 0.5,
        "shift_max": [2, 8, 8],
        "smooth_sigma": 1.0,
        "smooth_prob": 0.5,
        "jitter_amp": 0.05,
    },
    "inference": {
        "stride": 64,
        "lateral_stride": None,                # None = patch size
        "th": 0.5,
        "lung_margin": 0,                      # voxels added around the lung box
    },
    "graphcut": {
        "kappa": 8.0,
        "sigma": 100.0,
    },
    "metrics": {
        "detection_min_voxels": 1,
        "bootstrap_resamples": 10000,
        "confidence": 0.95,
    },
    "runtime": {
        "threads": 1,
        "deterministic": True,
    },
    "logging": {
        "level": "INFO",
        "file": "",
    },
}

# Environment variable -> dotted settings key
ENV_OVERRIDES = {
    "LOG_LEVEL": ("logging.level", str),
    "LOG_FILE": ("logging.file", str),
    "TUBULE_THREADS": ("runtime.threads", int),
    "TUBULE_SEED": ("train.seed", int),
}


def _deep_merge(base: dict, overrides: dict) -> dict:
    """Recursively merge overrides into base (in place) and return base."""
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_merge(base[key], value)
        else:
            base[key] = value
    return base


def _set_dotted(config: dict, dotted: str, value: Any):
    section, _, key = dotted.partition(".")
    config.setdefault(section, {})[key] = value


def get_config_paths(extra: Optional[str] = None) -> list[Path]:
    """Config files consulted in merge order."""
    here = Path(__file__).parent
    paths = [here / "config.yaml", here / "config.local.yaml"]
    env_path = os.environ.get("TUBULE_CONFIG")
    if env_path:
        paths.append(Path(env_path).expanduser())
    if extra:
        paths.append(Path(extra).expanduser())
    return paths


def load_config(extra_path: Optional[str] = None) -> dict:
    """Load configuration from YAML files and environment variables."""
    config = copy.deepcopy(DEFAULT_SETTINGS)

    for config_path in get_config_paths(extra_path):
        if not config_path.exists():
            continue
        try:
            with open(config_path, "r") as f:
                yaml_config = yaml.safe_load(f) or {}
            _deep_merge(config, yaml_config)
        except (yaml.YAMLError, OSError) as e:
            logger.warning(f"Could not load {config_path}: {e}")

    for env_name, (dotted, cast) in ENV_OVERRIDES.items():
        raw = os.environ.get(env_name)
        if raw:
            try:
                _set_dotted(config, dotted, cast(raw))
            except ValueError:
                logger.warning(f"Ignoring {env_name}={raw!r}: expected {cast.__name__}")

    return config


class Settings:
    """Read access to the merged configuration with dotted keys."""

    def __init__(self, extra_path: Optional[str] = None):
        self._settings = load_config(extra_path)

    def get(self, key: str, default=None):
        """Get a value by dotted key, e.g. ``get("model.alpha")``."""
        node: Any = self._settings
        for part in key.split("."):
            if not isinstance(node, dict) or part not in node:
                return default
            node = node[part]
        return node

    def set(self, key: str, value):
        """Override a dotted key for the current process (not persisted)."""
        _set_dotted(self._settings, key, value)

    def section(self, name: str) -> dict:
        """Copy of one top-level section."""
        return copy.deepcopy(self._settings.get(name, {}))

    def flatten(self) -> dict:
        """Dotted key -> value for every leaf, in sorted key order."""
        flat: dict = {}

        def walk(prefix: str, node):
            if isinstance(node, dict):
                for k in sorted(node):
                    walk(f"{prefix}.{k}" if prefix else k, node[k])
            else:
                flat[prefix] = node

        walk("", self._settings)
        return flat
