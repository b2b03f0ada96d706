"""Command-line surface for BatchlessNorm."""

from .application import BatchlessNorm, main
from .argument_parser import CLIArgumentParser

__all__ = ["BatchlessNorm", "CLIArgumentParser", "main"]
