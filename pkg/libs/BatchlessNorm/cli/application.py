"""Primary application interface for BatchlessNorm."""

from __future__ import annotations

import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from BatchlessNorm.cli.argument_parser import CLIArgumentParser, flag_overrides
from BatchlessNorm.cli.commands import COMMAND_HANDLERS, EXIT_FAILURE, EXIT_USAGE
from BatchlessNorm.experiments.suites import DIVERGENCE_ERRORS
from BatchlessNorm.utils.config_initializer import ensure_config_exists
from BatchlessNorm.utils.config_loader import resolve_config
from BatchlessNorm.utils.errors import (
    ConfigError,
    ContractError,
    DegenerateSampleError,
    IngestionError,
    MalformedCheckpointError,
    SchemaError,
)
from BatchlessNorm.utils.logger import LoggerWrapper, NoOpLogger

USAGE_ERRORS = (ConfigError, IngestionError, SchemaError, MalformedCheckpointError, FileNotFoundError)
FAILURE_ERRORS = (DegenerateSampleError, ContractError) + DIVERGENCE_ERRORS


class BatchlessNorm:
    """Entry point that resolves the configuration of one command and runs it."""

    def __init__(
        self,
        logger: Optional[object] = None,
        args: Optional[object] = None,
        *,
        cli_args: Optional[Sequence[str]] = None,
        use_cli: bool = False,
        config: Optional[dict] = None,
    ) -> None:
        self.logger = logger if logger is not None else NoOpLogger()

        if args is not None and (cli_args is not None or use_cli):
            raise ValueError("Provide either 'args' or CLI inputs, not both.")

        if args is None:
            # Without use_cli, an empty argv keeps programmatic use away from sys.argv.
            effective_cli_args = None if use_cli else (cli_args if cli_args is not None else [])
            self.args = CLIArgumentParser(argv=effective_cli_args).get_args()
        else:
            self.args = args

        self.config = config if config is not None else resolve_args_config(self.args)
        self.logger.info(f"Command: {self.args.command}")
        self.logger.info(f"Resolved config: {json.dumps(self.config, sort_keys=True, default=str)}")

    def run(self) -> int:
        """Run the command and map library errors to exit codes."""
        handler = COMMAND_HANDLERS[self.args.command]
        try:
            return handler(self.args, self.config, self.logger)
        except FAILURE_ERRORS as exc:
            self.logger.error(f"{type(exc).__name__}: {exc}")
            return EXIT_FAILURE
        except USAGE_ERRORS as exc:
            self.logger.error(f"{type(exc).__name__}: {exc}")
            return EXIT_USAGE


def resolve_args_config(args) -> dict:
    config_path = ensure_config_exists(Path(args.config)) if getattr(args, "config", None) else None
    return resolve_config(args.command, config_path, flag_overrides(args))


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = CLIArgumentParser(argv).get_args()
    try:
        config = resolve_args_config(args)
    except ValueError as exc:
        print(f"Configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    logger = LoggerWrapper(config, level=args.log_level)
    return BatchlessNorm(logger=logger, args=args, config=config).run()
