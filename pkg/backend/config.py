"""Configuration management for crf-cfi.

Stores settings in ~/.crf-cfi/config.json (directory overridable with the
CRF_CFI_HOME environment variable).
"""
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict

logger = logging.getLogger(__name__)

DEFAULTS: Dict[str, Any] = {
    # regularization
    "l1": 2.0,
    "l2": 1.0,
    "batch_size": 50,
    "t_err": 0.2,
    "t_sig": 0.2,
    # mean field
    "mf_max_sweeps": 100,
    "mf_tol": 1e-6,
    # termination
    "rel_tol": 1e-4,
    "patience": 3,
    "max_iterations": 500,
    # OWL-QN
    "lbfgs_memory": 10,
    "armijo_c": 1e-4,
    "backtrack_factor": 0.5,
    "max_line_search_steps": 30,
    "reset_memory_on_growth": False,
    "candidate_policy": "non-reference",
    "staging": "merged",
    # 0 means one worker per CPU
    "threads": 0,
    # evaluation
    "folds": 10,
    "fraction": 0.1,
    "bin_width": 0.05,
}


class ConfigError(ValueError):
    """Raised when a configuration value is out of its accepted range."""
    pass


def get_config_dir() -> Path:
    """Get config directory, create if not exists."""
    override = os.environ.get("CRF_CFI_HOME")
    config_dir = Path(override) if override else Path.home() / ".crf-cfi"
    config_dir.mkdir(parents=True, exist_ok=True)
    return config_dir


def get_config_file() -> Path:
    """Get config file path."""
    return get_config_dir() / "config.json"


def load_config() -> Dict[str, Any]:
    """Load config from file merged over the defaults."""
    config_file = get_config_file()
    defaults = dict(DEFAULTS)
    if not config_file.exists():
        return defaults
    try:
        with open(config_file, "r", encoding="utf-8") as f:
            user_config = json.load(f)
        if not isinstance(user_config, dict):
            raise ValueError("top-level value is not an object")
        unknown = sorted(set(user_config) - set(DEFAULTS))
        if unknown:
            logger.warning("ignoring unknown config keys: %s", ", ".join(unknown))
        result = defaults.copy()
        result.update({k: v for k, v in user_config.items() if k in DEFAULTS})
        return result
    except Exception as e:
        logger.warning("Error loading config %s: %s, using defaults", config_file, e)
        return defaults


def save_config(config: Dict[str, Any]) -> None:
    """Save config to file."""
    config_file = get_config_file()
    try:
        with open(config_file, "w", encoding="utf-8") as f:
            json.dump(config, f, indent=2, sort_keys=True)
    except OSError as e:
        logger.error("Error saving config %s: %s", config_file, e)


def validate_batch_size(value: int) -> bool:
    """Batch size J must be a positive integer."""
    return isinstance(value, int) and not isinstance(value, bool) and value >= 1


def validate_threshold(value: float) -> bool:
    """t_err / t_sig: errors and signals live in [-1, 1], so thresholds in [0, 1]."""
    return 0.0 <= value <= 1.0


def validate_regularizer(value: float) -> bool:
    return value >= 0.0


def validate_patience(value: int) -> bool:
    return isinstance(value, int) and value >= 1


def validate_rel_tol(value: float) -> bool:
    return 0.0 < value < 1.0


def require(ok: bool, name: str, value: Any) -> None:
    if not ok:
        raise ConfigError(f"invalid {name}: {value!r}")
