"""Configuration loader for BatchlessNorm experiments."""

from __future__ import annotations

import copy
import json
import os
from pathlib import Path
from typing import Any, Mapping, Optional

from dotenv import load_dotenv

from BatchlessNorm.utils.config_initializer import ensure_config_exists, load_packaged_defaults

COMMANDS = ("spiral", "cifar", "init-stats", "migrate", "report")
OUTPUT_DIR_ENV = "BATCHLESS_OUTPUT_DIR"


class ConfigLoader:
    """Singleton that loads and caches config documents, one per resolved path."""

    _instance = None
    _configs: dict[str, dict] = {}

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def load(self, config_path: Optional[Path] = None) -> dict:
        """Return the validated document at ``config_path`` (packaged defaults when None)."""
        path = ensure_config_exists(config_path)
        key = str(path.resolve())
        if key not in ConfigLoader._configs:
            ConfigLoader._configs[key] = self._load_config(path)
        return copy.deepcopy(ConfigLoader._configs[key])

    def clear(self) -> None:
        ConfigLoader._configs.clear()

    def _load_config(self, path: Path) -> dict:
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ValueError(f"Invalid JSON in config file {path}: {exc}") from exc

        if not self._validate_config(data):
            raise ValueError(f"Invalid configuration structure in {path}")
        return data

    def _validate_config(self, config: Any) -> bool:
        """Validate that the config has a paths section and one section per command."""
        if not isinstance(config, dict):
            return False
        if not isinstance(config.get("paths"), dict):
            return False
        for command in COMMANDS:
            # Sections may be omitted; the packaged defaults fill them in.
            if command in config and not isinstance(config[command], dict):
                return False
        return True


def _get_loader() -> ConfigLoader:
    return ConfigLoader()


def resolve_config(
    command: str,
    config_path: Optional[Path] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> dict:
    """Resolve the configuration for one command.

    Precedence: packaged defaults < config file section < flag overrides. Flags
    whose value is None are treated as absent. ``BATCHLESS_OUTPUT_DIR`` (read
    after loading ``.env``) replaces the file's output directory; an explicit
    flag still wins over it.

    Returns:
        Dict with keys ``command``, ``paths`` and ``settings``.
    """
    if command not in COMMANDS:
        raise ValueError(f"Unknown command '{command}'. Expected one of {COMMANDS}.")

    defaults = load_packaged_defaults()
    document = _get_loader().load(config_path) if config_path is not None else copy.deepcopy(defaults)

    paths = dict(defaults["paths"])
    paths.update(document.get("paths", {}))
    settings = dict(defaults[command])
    settings.update(document.get(command, {}))

    load_dotenv()
    env_output = os.environ.get(OUTPUT_DIR_ENV)
    if env_output:
        paths["output"] = env_output

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key in paths:
            paths[key] = value
        else:
            settings[key] = value

    return {"command": command, "paths": paths, "settings": settings}
