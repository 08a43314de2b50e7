#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Configuration module for mcaesthetics.

Defines configuration parameters and resolves them in layers:
defaults < profile preset < YAML config file < environment < explicit overrides.
The resolved mapping is hashed into a fingerprint that every report and
checkpoint carries.
"""

import copy
import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

import yaml

# Initialize a basic logger for config loading issues
logger = logging.getLogger(__name__)

ENV_PREFIX = "MCA_"

# Default configuration values
_CONFIG_DEFAULTS: Dict[str, Any] = {
    # Run
    "PROFILE": "PAPER",
    "SEED": 0,
    "RUNS_DIR": "runs",

    # Ingestion
    "SPLIT_RATIOS": [0.8, 0.1, 0.1],  # train / val / test
    "IMAGE_EXTENSION": ".jpg",  # AVA images are stored as <id>.jpg

    # Geometry
    "IMAGE_SIZE": 224,  # Network input side for AlexNet and VGG19
    "RESIZE_MODE": "aspect",  # "aspect" (shorter side + center crop) or "stretch"
    "PAD_VALUE": 0,
    "RANDOM_CROP_COUNT": 3,
    "RANDOM_CROP_MIN_SEP": 100,  # Chebyshev distance between crop centres
    "RANDOM_CROP_MAX_ATTEMPTS": 1000,
    "PIXEL_MEAN": [0.485, 0.456, 0.406],  # ImageNet statistics
    "PIXEL_STD": [0.229, 0.224, 0.225],

    # Saliency
    "SALIENCY_WORKING_WIDTH": 64,
    "SALIENCY_EPSILON": 1e-8,
    "SALIENCY_AMPLITUDE_FLOOR": 0.01,  # Fraction of the median spectrum amplitude; lifts exact-zero bins
    "SALIENCY_SPECTRUM_BOX": 3,
    "SALIENCY_GAUSSIAN_SIGMA": 2.5,
    "SALIENCY_FINE_SCALES": [8, 16, 32],  # Box half-widths of the surround
    "SALIENCY_FLAT_TOLERANCE": 1e-12,

    # Backbones
    "BACKBONE": "vgg19",  # vgg19, alexnet or tiny
    "PRETRAINED": True,
    "WEIGHTS_PATH": "",  # Single-file checkpoint in block{i}.conv{j} naming
    "WEIGHTS_CACHE_DIR": "",  # Ported ImageNet weights; empty means <RUNS_DIR>/weights
    "HEAD_WIDTHS": [4096, 2048, 1024, 512, 256, 128, 64, 32, 2],
    "ALEXNET_HEAD_WIDTHS": [4096, 4096, 2],
    "TINY_CHANNELS": [8, 16],
    "TINY_POOL": 4,  # Adaptive pool side of the tiny backbone

    # Multi-column
    "COLUMNS": 3,
    "FUSION_WIDTHS": [512, 2],
    "MULTIPLEX_STRATEGY": "random",  # random or average

    # Training
    "HEAD_EPOCHS": 300,
    "FINETUNE_EPOCHS": 100,
    "EPOCH_MULTIPLIER": 1.0,
    "MIN_STAGE_EPOCHS": 1,
    "OPTIMIZER": "sgd",  # sgd or adam
    "MOMENTUM": 0.9,
    "HEAD_LR": 1e-3,
    "FINETUNE_LR": 1e-4,
    "BATCH_SIZE": 32,
    "CLASS_WEIGHTED_LOSS": False,
    "CHECKPOINT_INTERVAL": 10,  # Epochs between intermediate checkpoints (0 = stage end only)
    "DIVERGENCE_LOSS_CEILING": 1e6,
    "NUM_WORKERS": 0,
    "DETERMINISTIC": True,

    # Caching
    "VARIANT_CACHE_SIZE": 512,  # Prepared variant planes kept in memory
    "IMAGE_CACHE_SIZE": 64,  # Decoded source images kept in memory
    "CACHE_EVICTION_PERCENT": 20,  # Percentage of entries to evict when cache is full

    # Memory Management
    "MEMORY_PRESSURE_THRESHOLD_MB": 4096,
    "SYSTEM_LOW_MEMORY_THRESHOLD_MB": 512,
    "MEMORY_CHECK_INTERVAL_SECONDS": 60,

    # Logging
    "LOG_LEVEL_CONSOLE": "INFO",
    "LOG_LEVEL_FILE": "DEBUG",
    "LOG_STRUCTURED": True,
    "LOG_FILE": "mcaesthetics.log",
}

# Profile presets, applied on top of the defaults
_PROFILE_PRESETS: Dict[str, Dict[str, Any]] = {
    "PAPER": {},
    "DESK": {
        "BACKBONE": "tiny",
        "PRETRAINED": False,
        "EPOCH_MULTIPLIER": 0.01,
        "MIN_STAGE_EPOCHS": 3,
        "BATCH_SIZE": 8,
        "HEAD_WIDTHS": [64, 64, 64, 32, 32, 32, 16, 16, 2],
        "FUSION_WIDTHS": [64, 2],
        "OPTIMIZER": "adam",
        "HEAD_LR": 1e-3,
        "FINETUNE_LR": 1e-4,
        "CHECKPOINT_INTERVAL": 1,
    },
}


class Config:
    """Configuration class resolving layered values into attributes."""

    def __init__(self, load_from_env=True, profile: Optional[str] = None):
        """Initialize configuration with default values and optionally from environment.

        Args:
            load_from_env: Whether to load values from environment variables
            profile: Optional profile preset name (PAPER or DESK)
        """
        self._layers: Dict[str, str] = {}
        self.reset(profile=profile, load_from_env=load_from_env)

    def reset(self, profile: Optional[str] = None, load_from_env: bool = False) -> None:
        """Drop every layer and start again from the defaults."""
        for key, value in _CONFIG_DEFAULTS.items():
            setattr(self, key, copy.deepcopy(value))
        self._layers = {key: "default" for key in _CONFIG_DEFAULTS}
        self.apply_profile(profile or os.environ.get(f"{ENV_PREFIX}PROFILE", "PAPER"))
        if load_from_env:
            self.load_from_env()

    def apply_profile(self, name: str) -> None:
        """Apply a named profile preset on top of the defaults."""
        profile = str(name).upper()
        if profile not in _PROFILE_PRESETS:
            from exceptions import ConfigurationError
            raise ConfigurationError(f"Unknown profile '{name}' (expected one of {sorted(_PROFILE_PRESETS)})")
        self.PROFILE = profile
        self._layers["PROFILE"] = "profile"
        for key, value in _PROFILE_PRESETS[profile].items():
            setattr(self, key, copy.deepcopy(value))
            self._layers[key] = "profile"
        logger.debug(f"Profile {profile} applied")

    def load_file(self, path: Union[str, Path]) -> None:
        """Load a YAML config file (a flat key-value mapping).

        Args:
            path: Path to the YAML file

        Raises:
            ConfigurationError: If the file is unreadable or holds unknown keys
        """
        from exceptions import ConfigurationError
        path = Path(path)
        try:
            with path.open("r", encoding="utf-8") as f:
                data = yaml.safe_load(f) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigurationError(f"Could not read config file {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigurationError(f"Config file {path} must hold a mapping")
        if "PROFILE" in {str(k).upper() for k in data}:
            profile = next(v for k, v in data.items() if str(k).upper() == "PROFILE")
            self.apply_profile(profile)
        self.apply_overrides({k: v for k, v in data.items() if str(k).upper() != "PROFILE"}, layer="file")
        logger.info(f"Configuration loaded from {path}")

    def apply_overrides(self, overrides: Mapping[str, Any], layer: str = "override") -> None:
        """Apply explicit key-value overrides (CLI flags, tests).

        Raises:
            ConfigurationError: On unknown keys
        """
        from exceptions import ConfigurationError
        for raw_key, value in overrides.items():
            key = str(raw_key).upper()
            if key not in _CONFIG_DEFAULTS:
                raise ConfigurationError(f"Unknown configuration key: {raw_key}")
            if key == "PROFILE":
                self.apply_profile(value)
                continue
            setattr(self, key, copy.deepcopy(value))
            self._layers[key] = layer

    def load_from_env(self):
        """Load configuration values from MCA_-prefixed environment variables."""
        for key, default in _CONFIG_DEFAULTS.items():
            if key == "PROFILE":
                continue
            if isinstance(default, bool):
                self._load_bool_from_env(key)
            elif isinstance(default, int):
                self._load_int_from_env(key)
            elif isinstance(default, float):
                self._load_float_from_env(key)
            elif isinstance(default, list):
                self._load_list_from_env(key, float if any(isinstance(v, float) for v in default) else int)
            else:
                env_value = os.environ.get(ENV_PREFIX + key)
                if env_value is not None:
                    setattr(self, key, env_value)
                    self._layers[key] = "env"

    def _load_int_from_env(self, key):
        """Load an integer value from environment variable.

        Args:
            key: The configuration key to load

        Returns:
            bool: True if the value was loaded, False otherwise
        """
        env_value = os.environ.get(ENV_PREFIX + key)
        if env_value is not None:
            try:
                setattr(self, key, int(env_value))
                self._layers[key] = "env"
                return True
            except ValueError:
                logger.warning(f"Invalid integer value for {key}: {env_value}")
        return False

    def _load_float_from_env(self, key):
        """Load a float value from environment variable.

        Args:
            key: The configuration key to load

        Returns:
            bool: True if the value was loaded, False otherwise
        """
        env_value = os.environ.get(ENV_PREFIX + key)
        if env_value is not None:
            try:
                setattr(self, key, float(env_value))
                self._layers[key] = "env"
                return True
            except ValueError:
                logger.warning(f"Invalid float value for {key}: {env_value}")
        return False

    def _load_bool_from_env(self, key):
        env_value = os.environ.get(ENV_PREFIX + key)
        if env_value is None:
            return False
        setattr(self, key, env_value.strip().lower() in ("true", "1", "yes", "y", "on"))
        self._layers[key] = "env"
        return True

    def _load_list_from_env(self, key, item_type):
        env_value = os.environ.get(ENV_PREFIX + key)
        if not env_value:
            return False
        try:
            setattr(self, key, [item_type(v.strip()) for v in env_value.split(",") if v.strip()])
            self._layers[key] = "env"
            return True
        except ValueError:
            logger.warning(f"Invalid list value for {key}: {env_value}")
            return False

    def resolved(self) -> Dict[str, Any]:
        """Return the effective configuration as a plain dict."""
        return {key: copy.deepcopy(getattr(self, key)) for key in _CONFIG_DEFAULTS}

    def source_of(self, key: str) -> str:
        """Name the layer that last set a key (default, profile, file, env, override)."""
        return self._layers.get(key.upper(), "default")

    def fingerprint(self) -> str:
        """Short SHA-256 digest of the resolved configuration."""
        return fingerprint_of(self.resolved())

    def dump(self, path: Union[str, Path]) -> None:
        """Write the resolved configuration as YAML."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as f:
            yaml.safe_dump(self.resolved(), f, sort_keys=True)


def fingerprint_of(mapping: Mapping[str, Any]) -> str:
    canonical = json.dumps(mapping, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


# Create a single instance of Config to be imported by other modules
config = Config(load_from_env=True)
