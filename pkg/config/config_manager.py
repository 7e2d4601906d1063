"""
Configuration Manager - Handles loading and accessing the run configuration
Supports .env files, environment variables, JSON and YAML configurations
"""

import copy
import hashlib
import json
import logging
import os
from typing import Any, Dict, Optional

import yaml
from dotenv import load_dotenv

from core.errors import ConfigError

SCHEMA_VERSION = 1

# Top-level keys that do not change any artifact
UNHASHED_KEYS = ("LOG_LEVEL", "THREADS", "OUT_DIR")

ENV_PREFIX = "VERIFSCOPE_"

DEFAULT_LOCATIONS = [
    "./verifscope.yaml",
    "./verifscope.yml",
    "./verifscope.json",
    "./config/verifscope.yaml",
    "./config/verifscope.json",
]


def default_config() -> Dict[str, Any]:
    return {
        "SCHEMA_VERSION": SCHEMA_VERSION,
        "SEED": 0,
        "OUT_DIR": "./runs/default",
        "LOG_LEVEL": "INFO",
        "THREADS": 1,

        "data": {
            "seed": None,
            "count": 4000,
            "n_failures_max": 3,
            "operand_counts": [3, 4],
            "val_fraction": 0.1,
            "test_fraction": 0.1,
        },
        "model": {
            "n_layers": 6,
            "d_model": 128,
            "n_heads": 4,
            "d_head": 32,
            "d_glu": 256,
            "vocab_size": 1099,
            "max_seq_len": 256,
            "norm_eps": 1e-5,
        },
        "train": {
            "seed": None,
            "learning_rate": 0.05,
            "batch_size": 8,
            "max_steps": 4000,
            "weight_decay": 0.01,
            "patience": 10,
            "eval_every": 50,
            "momentum": 0.0,
            "clip_norm": 0.0,
            "eval_generations": 16,
            "max_new_tokens": 200,
        },
        "capture": {
            "samples": 300,
            "split": "test",
            "max_new": 200,
            "fields": ["hidden", "attention", "glu"],
        },
        "probe": {
            "seed": None,
            "corpus_samples": 2000,
            "learning_rate": 1e-4,
            "batch_size": 8,
            "val_size": 256,
            "weight_decay": 0.01,
            "eval_every": 50,
            "patience": 10,
            "max_steps": 5000,
            "balance": True,
        },
        "lens": {
            "top_k": 5,
            "timestep_class": "valid",
            "plan": None,
        },
        "glu": {
            "k": 50,
            "layers": None,
            "dedup": True,
            "neighbors": 10,
        },
        "heads": {
            "threshold": 0.10,
            "sweep": [0.025, 0.05, 0.10],
            "pooling": "per_sample",
            "n": 200,
            "n_sweep": [50, 100, 200, 300],
            "power_iterations": 100,
        },
        "search": {
            "method": "eq8",
            "budget": 8,
            "samples": 50,
        },
        "intervene": {
            "seed": None,
            "samples": 300,
            "max_new": 100,
            "gating": "at_attempt_markers",
            "span": "marker_span",
            "baseline_runs": 5,
        },
        "steer": {
            "alpha": 20.0,
            "layers": None,
            "probe_layer": None,
            "samples": 50,
            "max_new": 100,
        },
        "transfer": {
            "seed": None,
            "n_sample": None,
        },
        "report": {
            "force": False,
        },
    }


def _coerce(value: str) -> Any:
    """Environment strings to bool, int or float where they look like one."""
    if value.lower() in ["true", "yes"]:
        return True
    if value.lower() in ["false", "no"]:
        return False
    if value.isdigit():
        return int(value)
    if value.replace(".", "", 1).isdigit():
        return float(value)
    return value


class ConfigManager:
    """
    Configuration manager for VerifScope runs.
    Layers built-in defaults, .env, VERIFSCOPE_* variables and a JSON/YAML file.
    """

    def __init__(self, config_path: Optional[str] = None, use_env: bool = True):
        """
        Initialize the configuration manager

        Args:
            config_path: Path to configuration file (optional)
            use_env: Read .env and VERIFSCOPE_* variables
        """
        self.logger = logging.getLogger("VerifScope.ConfigManager")
        self.config = default_config()

        if use_env:
            self._load_env_vars()

        if config_path:
            if not os.path.exists(config_path):
                raise ConfigError(f"Configuration file not found: {config_path}")
            self._load_config_file(config_path)
        else:
            for location in DEFAULT_LOCATIONS:
                if os.path.exists(location):
                    self._load_config_file(location)
                    break

        if self.config.get("SCHEMA_VERSION") != SCHEMA_VERSION:
            raise ConfigError(
                f"Unsupported SCHEMA_VERSION {self.config.get('SCHEMA_VERSION')!r}, expected {SCHEMA_VERSION}"
            )
        self.logger.debug("Configuration loaded successfully")

    def _load_env_vars(self) -> None:
        """Load top-level overrides from .env and the environment"""
        load_dotenv()
        for key in ("THREADS", "LOG_LEVEL", "OUT_DIR", "SEED"):
            env_value = os.environ.get(ENV_PREFIX + key)
            if env_value is not None:
                self.config[key] = _coerce(env_value)

    def _load_config_file(self, config_path: str) -> None:
        """
        Deep-merge a configuration file over the current values

        Raises:
            ConfigError: unreadable file, unsupported format, unknown section or key
        """
        file_ext = os.path.splitext(config_path)[1].lower()
        try:
            with open(config_path, "r", encoding="utf-8") as f:
                if file_ext == ".json":
                    file_config = json.load(f)
                elif file_ext in [".yaml", ".yml"]:
                    file_config = yaml.safe_load(f)
                else:
                    raise ConfigError(f"Unsupported configuration file format: {file_ext}")
        except (OSError, json.JSONDecodeError, yaml.YAMLError) as e:
            raise ConfigError(f"Error loading configuration file {config_path}: {e}") from e

        if file_config is None:
            file_config = {}
        if not isinstance(file_config, dict):
            raise ConfigError(f"{config_path}: top level must be a mapping")
        self.merge(file_config)
        self.logger.info(f"Loaded configuration from {config_path}")

    def merge(self, overrides: Dict[str, Any]) -> None:
        """Apply a nested dictionary of overrides; unknown names raise ConfigError."""
        for key, value in overrides.items():
            if key not in self.config:
                raise ConfigError(f"Unknown configuration section or key: {key}")
            if isinstance(self.config[key], dict):
                if not isinstance(value, dict):
                    raise ConfigError(f"Section {key} must be a mapping")
                for sub, sub_value in value.items():
                    if sub not in self.config[key]:
                        raise ConfigError(f"Unknown key {key}.{sub}")
                    self.config[key][sub] = sub_value
            else:
                self.config[key] = value

    def get(self, key: str, default: Any = None) -> Any:
        """
        Get a configuration value

        Args:
            key: Configuration key
            default: Default value if key not found

        Returns:
            Configuration value or default
        """
        return self.config.get(key, default)

    def set(self, key: str, value: Any) -> None:
        self.config[key] = value
        self.logger.debug(f"Set configuration {key} = {value}")

    def section(self, name: str) -> Dict[str, Any]:
        """
        Copy of one stage section; a `seed` of None inherits the top-level SEED

        Raises:
            ConfigError: unknown section, or a stochastic section with no seed anywhere
        """
        if name not in self.config or not isinstance(self.config[name], dict):
            raise ConfigError(f"Unknown configuration section: {name}")
        section = copy.deepcopy(self.config[name])
        if "seed" in section and section["seed"] is None:
            if self.config.get("SEED") is None:
                raise ConfigError(f"Stage {name} needs a seed: set {name}.seed or SEED")
            section["seed"] = int(self.config["SEED"])
        return section

    def digest(self) -> str:
        """SHA-256 of the canonical JSON of everything that shapes artifacts."""
        hashed = {k: v for k, v in self.config.items() if k not in UNHASHED_KEYS}
        canonical = json.dumps(hashed, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def save(self, config_path: str) -> None:
        """
        Save current configuration to a JSON or YAML file

        Raises:
            ConfigError: unsupported extension
        """
        os.makedirs(os.path.dirname(os.path.abspath(config_path)), exist_ok=True)
        file_ext = os.path.splitext(config_path)[1].lower()
        with open(config_path, "w", encoding="utf-8") as f:
            if file_ext == ".json":
                json.dump(self.config, f, indent=2, sort_keys=True)
            elif file_ext in [".yaml", ".yml"]:
                yaml.safe_dump(self.config, f, sort_keys=True)
            else:
                raise ConfigError(f"Unsupported configuration file format: {file_ext}")
        self.logger.info(f"Saved configuration to {config_path}")

    def get_all(self) -> Dict[str, Any]:
        return copy.deepcopy(self.config)
