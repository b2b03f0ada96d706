"""Utility helpers for BatchlessNorm."""

from .config_loader import resolve_config
from .errors import (
	ConfigError,
	ContractError,
	DegenerateParameterError,
	DegenerateSampleError,
	DegenerateSigmaError,
	DimensionError,
	DomainError,
	IngestionError,
	InsufficientBatchError,
	LabelIndexError,
	MalformedCheckpointError,
	NonFiniteError,
	SchemaError,
)
from .logger import LoggerWrapper, NoOpLogger

__all__ = [
	"LoggerWrapper",
	"NoOpLogger",
	"resolve_config",
	"ConfigError",
	"ContractError",
	"DegenerateParameterError",
	"DegenerateSampleError",
	"DegenerateSigmaError",
	"DimensionError",
	"DomainError",
	"IngestionError",
	"InsufficientBatchError",
	"LabelIndexError",
	"MalformedCheckpointError",
	"NonFiniteError",
	"SchemaError",
]
