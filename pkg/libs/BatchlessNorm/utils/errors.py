"""Exception types raised across BatchlessNorm.

Each error subclasses the builtin that best describes it, so callers can catch
either the specific type or the builtin.
"""

from __future__ import annotations

from typing import Optional


class DimensionError(ValueError):
    """Operand shapes do not compose."""


class DomainError(ValueError):
    """An elementwise op was evaluated outside its domain (log of x <= 0, x / 0)."""


class LabelIndexError(IndexError):
    """A class label lies outside [0, class count)."""


class ContractError(RuntimeError):
    """A caller broke an API precondition (non-scalar loss, empty dataset, ...)."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class DegenerateParameterError(ValueError):
    """A sigma parameter cannot be mapped to a standard deviation (INVERSE mode with p = 0)."""


class DegenerateSigmaError(ValueError):
    """|sigma| fell below the sigma floor."""


class DegenerateSampleError(ValueError):
    """A sample's standard deviation for some unit is below the sigma floor."""

    def __init__(self, layer: str, unit: int, std: float) -> None:
        self.layer = layer
        self.unit = unit
        self.std = std
        super().__init__(f"Layer '{layer}' unit {unit}: sample std {std:.3g} is below the sigma floor.")


class InsufficientBatchError(ValueError):
    """Batch statistics need more than one contributing value per unit."""


class MalformedCheckpointError(ValueError):
    """A checkpoint lacks fields or statistics the caller needs."""


class ConfigError(ValueError):
    """A configuration value is invalid."""


class IngestionError(OSError):
    """A dataset file is missing, truncated or malformed."""

    def __init__(self, file_name: str, offset: int, reason: str, cause: Optional[BaseException] = None) -> None:
        self.file_name = file_name
        self.offset = offset
        self.reason = reason
        super().__init__(f"{file_name} (byte offset {offset}): {reason}")
        if cause is not None:
            self.__cause__ = cause


class SchemaError(ValueError):
    """A results file lacks required columns."""

    def __init__(self, file_name: str, missing: list[str]) -> None:
        self.file_name = file_name
        self.missing = list(missing)
        super().__init__(f"{file_name} is missing columns: {', '.join(self.missing)}")
