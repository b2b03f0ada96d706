"""Versioned JSON checkpoints: layer list, named shaped arrays and norm-layer metadata.

See ``docs/checkpoint_format.md`` for the document layout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Union

import numpy as np

from BatchlessNorm.utils.errors import MalformedCheckpointError

CHECKPOINT_FORMAT = "batchless-checkpoint"
CHECKPOINT_VERSION = 1

_REQUIRED_KEYS = ("format", "version", "architecture", "norm_kind", "seed", "input_shape", "layers")


@dataclass
class LayerRecord:
    name: str
    kind: str
    params: dict[str, Any] = field(default_factory=dict)
    arrays: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class Checkpoint:
    architecture: str
    norm_kind: str
    seed: int
    input_shape: tuple[int, ...]
    layers: list[LayerRecord]
    decay: dict[str, float] = field(default_factory=dict)
    norm_slots: list[dict] = field(default_factory=list)
    init_width: str = "full"
    metadata: dict[str, Any] = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    def layer(self, name: str) -> LayerRecord:
        for record in self.layers:
            if record.name == name:
                return record
        raise KeyError(name)

    def norm_records(self, kinds=None) -> list[LayerRecord]:
        return [
            r for r in self.layers if r.kind == "norm" and (kinds is None or r.params.get("norm_kind") in kinds)
        ]

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": self.version,
            "architecture": self.architecture,
            "norm_kind": self.norm_kind,
            "seed": self.seed,
            "input_shape": list(self.input_shape),
            "init_width": self.init_width,
            "decay": dict(self.decay),
            "norm_slots": list(self.norm_slots),
            "metadata": self.metadata,
            "layers": [
                {
                    "name": r.name,
                    "kind": r.kind,
                    "params": r.params,
                    "arrays": {
                        key: {"shape": list(a.shape), "values": [float(v) for v in a.reshape(-1)]}
                        for key, a in r.arrays.items()
                    },
                }
                for r in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, data: Any) -> "Checkpoint":
        if not isinstance(data, dict):
            raise MalformedCheckpointError("Checkpoint document must be a JSON object.")
        missing = [key for key in _REQUIRED_KEYS if key not in data]
        if missing:
            raise MalformedCheckpointError(f"Checkpoint is missing fields: {', '.join(missing)}.")
        if data["format"] != CHECKPOINT_FORMAT:
            raise MalformedCheckpointError(f"Unknown checkpoint format {data['format']!r}.")
        if data["version"] != CHECKPOINT_VERSION:
            raise MalformedCheckpointError(f"Unsupported checkpoint version {data['version']!r}.")

        layers = []
        for entry in data["layers"]:
            try:
                name, kind = entry["name"], entry["kind"]
                arrays = {key: _decode_array(name, key, raw) for key, raw in entry.get("arrays", {}).items()}
            except (KeyError, TypeError) as exc:
                raise MalformedCheckpointError(f"Malformed layer entry: {exc}") from exc
            layers.append(LayerRecord(name, kind, dict(entry.get("params", {})), arrays))

        return cls(
            architecture=data["architecture"],
            norm_kind=data["norm_kind"],
            seed=int(data["seed"]),
            input_shape=tuple(int(d) for d in data["input_shape"]),
            layers=layers,
            decay={k: float(v) for k, v in data.get("decay", {}).items()},
            norm_slots=list(data.get("norm_slots", [])),
            init_width=data.get("init_width", "full"),
            metadata=dict(data.get("metadata", {})),
            version=data["version"],
        )


def _decode_array(layer: str, key: str, raw: dict) -> np.ndarray:
    shape = tuple(int(d) for d in raw["shape"])
    values = np.asarray(raw["values"], dtype=np.float64)
    if values.ndim != 1 or values.size != int(np.prod(shape)):
        raise MalformedCheckpointError(
            f"Array '{layer}.{key}' holds {values.size} values but declares shape {shape}."
        )
    return values.reshape(shape)


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> Path:
    """Write ``checkpoint`` as JSON; floats use repr, which round-trips doubles exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(checkpoint.to_dict(), f, indent=1)
        f.write("\n")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as exc:
        raise MalformedCheckpointError(f"Invalid JSON in checkpoint {path}: {exc}") from exc
    return Checkpoint.from_dict(data)
