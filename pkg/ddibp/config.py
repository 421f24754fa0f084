"""
Configuration management for ddibp.
Environment settings (DDIBP_*) and flat dotted-key run configuration files.
"""

import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional

from dotenv import dotenv_values, load_dotenv
from pydantic import ValidationError

from .errors import ConfigError
from .models import DecaySpec, McmcConfig, RunConfig


logger = logging.getLogger(__name__)

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")
NESTED_SECTIONS = {"decay": DecaySpec, "mcmc": McmcConfig}


class Config:
    """Process-wide settings from the environment (and .env at the project root)."""

    def __init__(self):
        self.project_root = Path(__file__).parent.parent
        env_path = self.project_root / ".env"
        if env_path.exists():
            load_dotenv(env_path, override=True)

        # Output locations
        self.output_dir = Path(os.getenv("DDIBP_OUTPUT_DIR", "./runs"))
        self.database_url = os.getenv("DDIBP_DATABASE_URL", "sqlite:///./db/runs.db")

        # Logging
        self.log_level = os.getenv("DDIBP_LOG_LEVEL", "INFO").upper()
        if self.log_level not in LOG_LEVELS:
            raise ConfigError(f"Unknown log level {self.log_level}", key="DDIBP_LOG_LEVEL")

        # Compute
        self.n_jobs = _int_env("DDIBP_N_JOBS", 1)
        self.verify_draws = _int_env("DDIBP_VERIFY_DRAWS", 100_000)
        if self.verify_draws < 1:
            raise ConfigError("DDIBP_VERIFY_DRAWS must be positive", key="DDIBP_VERIFY_DRAWS")


def _int_env(key: str, default: int) -> int:
    raw = os.getenv(key, str(default))
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{key} must be an integer, got {raw!r}", key=key)


def load_config() -> Config:
    """Load configuration from environment."""
    return Config()


def nest_keys(flat: Dict[str, Any]) -> Dict[str, Any]:
    """
    Turn dotted keys into nested dictionaries and reject unknown keys.

    Args:
        flat: Mapping such as {"decay.kind": "window", "mcmc.seed": 3}

    Returns:
        Nested mapping ready for RunConfig validation
    """
    nested: Dict[str, Any] = {}
    for key, value in flat.items():
        head, _, tail = key.strip().partition(".")
        if head not in RunConfig.model_fields:
            raise ConfigError(f"Unknown configuration key {key}", key=key)
        if not tail:
            nested[head] = value
            continue
        section = NESTED_SECTIONS.get(head)
        if section is None or tail not in section.model_fields:
            raise ConfigError(f"Unknown configuration key {key}", key=key)
        nested.setdefault(head, {})[tail] = value
    return nested


def load_run_config(path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None,
                    defaults: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Build a RunConfig from a dotted-key file, then apply command-line overrides.

    Args:
        path: Optional `key = value` file (comments with #)
        overrides: Dotted keys from the command line; None values are ignored
        defaults: Lowest-precedence keys (environment settings)

    Returns:
        Validated RunConfig

    Raises:
        ConfigError: naming the offending key
    """
    values: Dict[str, Any] = dict(defaults or {})
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}", key="config")
        file_values = {k: v for k, v in dotenv_values(path).items() if v is not None}
        values.update(file_values)
        logger.info(f"Loaded {len(file_values)} keys from {path}")

    values.update({k: v for k, v in (overrides or {}).items() if v is not None})

    try:
        return RunConfig.model_validate(nest_keys(values))
    except ValidationError as e:
        error = e.errors()[0]
        key = ".".join(str(part) for part in error["loc"]) or "config"
        raise ConfigError(f"Invalid value for {key}: {error['msg']}", key=key) from e


def write_run_config(config: RunConfig, path: Path) -> Path:
    """Persist a RunConfig in the same dotted-key format load_run_config reads."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# config hash {config.config_hash()}"]
    for key, value in sorted(config.to_flat().items()):
        if any(ch in value for ch in " #'\""):
            value = "'" + value.replace("'", "\\'") + "'"
        lines.append(f"{key}={value}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
