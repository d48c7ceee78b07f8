import logging
import os
import sys
from collections.abc import Mapping
from pathlib import Path
from typing import Any

from cmanet.dataio import read_config, validate_config
from cmanet.models import PipelineConfig

CONFIG_DIR_ENV = "CMANET_CONFIG_DIR"


# logging
def setup_logging(log_level: str, log_file: str | None = None) -> None:
    """Configure logging for the application."""
    numeric_level = getattr(logging, log_level.upper(), None)
    if not isinstance(numeric_level, int):
        raise ValueError(f"Invalid log level: {log_level}")

    formatter = logging.Formatter(
        "%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )

    root_logger = logging.getLogger()
    root_logger.setLevel(numeric_level)
    root_logger.handlers.clear()

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(numeric_level)
    console_handler.setFormatter(formatter)
    root_logger.addHandler(console_handler)

    if log_file:
        file_handler = logging.FileHandler(log_file)
        file_handler.setLevel(numeric_level)
        file_handler.setFormatter(formatter)
        root_logger.addHandler(file_handler)

    # Suppress noisy third-party loggers
    logging.getLogger("asyncio").setLevel(logging.WARNING)
    logging.getLogger("numexpr").setLevel(logging.WARNING)


def progress_enabled(no_progress: bool) -> bool:
    """Progress bars only on an interactive terminal and unless switched off."""
    return not no_progress and sys.stderr.isatty()


# configuration
def resolve_config_path(name: str | Path) -> Path:
    """An existing path is used as is; otherwise ``NAME`` is looked up as
    ``$CMANET_CONFIG_DIR/NAME.toml``."""
    path = Path(name)
    if path.exists():
        return path
    config_dir = os.environ.get(CONFIG_DIR_ENV)
    if config_dir:
        candidate = Path(config_dir) / f"{name}.toml"
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"configuration '{name}' not found (also searched ${CONFIG_DIR_ENV})")


def _merge(base: dict[str, Any], overrides: Mapping[str, Any]) -> dict[str, Any]:
    for dotted, value in overrides.items():
        if value is None:
            continue
        *sections, key = dotted.split(".")
        target = base
        for section in sections:
            target = target.setdefault(section, {})
        target[key] = value
    return base


def load_config(name: str | Path | None, overrides: Mapping[str, Any] | None = None) -> PipelineConfig:
    """Read a configuration file (or the defaults) and apply dotted-key overrides.

    Args:
        name: path or name under ``$CMANET_CONFIG_DIR``; None uses the built-in defaults.
        overrides: e.g. ``{"train.epochs": 2}``; None values are ignored so unset
            CLI flags can be passed straight through.

    Returns:
        The validated configuration.
    """
    config = read_config(resolve_config_path(name)) if name is not None else PipelineConfig()
    if not overrides:
        return config
    source = f"{name or 'defaults'} (with command-line overrides)"
    return validate_config(_merge(config.model_dump(mode="json"), overrides), source)
