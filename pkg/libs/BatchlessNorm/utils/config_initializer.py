"""Seeds user config documents from the defaults shipped with the package.

A ``--config`` path that does not exist yet receives a copy of
``experiment_config.json``, which the user can then edit. An existing document
is never rewritten.
"""

from __future__ import annotations

import json
import shutil
from pathlib import Path
from typing import Optional

PACKAGED_CONFIG = Path(__file__).parent.parent / "experiment_config.json"


def load_packaged_defaults() -> dict:
    with open(PACKAGED_CONFIG, "r", encoding="utf-8") as f:
        return json.load(f)


def ensure_config_exists(config_path: Optional[Path] = None) -> Path:
    """Return the document to read, copying the defaults to ``config_path`` if absent.

    ``None`` selects the packaged document itself.
    """
    if config_path is None:
        return PACKAGED_CONFIG

    target = Path(config_path)
    if target.exists():
        return target
    target.parent.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(PACKAGED_CONFIG, target)
    return target
