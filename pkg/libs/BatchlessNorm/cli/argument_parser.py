"""Command-line argument parsing for BatchlessNorm."""

from __future__ import annotations

import argparse
from typing import Optional, Sequence

from BatchlessNorm.nn.normalization import NORM_KINDS, SigmaMode

CIFAR_NORM_KINDS = tuple(kind for kind in NORM_KINDS if kind != "brn")

# Flags that never map onto a config key.
COMMAND_ONLY_FLAGS = ("command", "config", "log_level", "checkpoint", "out", "results", "out_dir", "insert_before")


class CLIArgumentParser:
    """Build and parse CLI arguments for BatchlessNorm."""

    def __init__(self, argv: Optional[Sequence[str]] = None) -> None:
        self.parser = self._create_parser()
        self.args = self.parser.parse_args(argv)
        self._validate_args(self.args)

    def _create_parser(self) -> argparse.ArgumentParser:
        parser = argparse.ArgumentParser(description="Batchless normalization experiments and checkpoint tools.")
        parser.add_argument(
            "--config",
            type=str,
            default=None,
            help="Path to a JSON config document. Created from the packaged defaults if missing.",
        )
        parser.add_argument(
            "--output",
            type=str,
            default=None,
            help="Directory for result files and checkpoints (overrides paths.output).",
        )
        parser.add_argument(
            "--log-level",
            type=str,
            choices=["DEBUG", "INFO", "WARNING", "ERROR"],
            default="INFO",
            help="Console log level. The run log file always records DEBUG.",
        )
        subparsers = parser.add_subparsers(dest="command", required=True)

        spiral = subparsers.add_parser("spiral", help="Run the spiral convergence and stability suite.")
        self._add_suite_arguments(spiral, NORM_KINDS)
        spiral.add_argument("--optimizer", choices=["adam", "amsgrad"], default=None, help="Optimizer.")
        spiral.add_argument("--patience", type=int, default=None, help="Batches without a new median low.")
        spiral.add_argument("--hard-cap", dest="hard_cap", type=int, default=None, help="Maximum training batches.")
        spiral.add_argument(
            "--fluctuation-batches",
            dest="fluctuation_batches",
            type=int,
            default=None,
            help="Training batches snapshotted for the fluctuation score.",
        )
        spiral.add_argument("--grid-size", dest="grid_size", type=int, default=None, help="Sites per grid axis.")
        spiral.add_argument(
            "--n-train", dest="n_train_per_class", type=int, default=None, help="Training points per class."
        )
        spiral.add_argument(
            "--n-val", dest="n_val_per_class", type=int, default=None, help="Validation points per class."
        )
        spiral.add_argument(
            "--accumulate",
            action="store_true",
            default=None,
            help="Accumulate per-instance gradients instead of one batched backward pass.",
        )
        spiral.add_argument(
            "--report-train-loss",
            dest="report_train_loss",
            action="store_true",
            default=None,
            help="Also evaluate the cross-entropy on the whole training set.",
        )

        cifar = subparsers.add_parser("cifar", help="Run reduced-scale CIFAR-10 training.")
        self._add_suite_arguments(cifar, CIFAR_NORM_KINDS)
        cifar.add_argument("--data-dir", dest="cifar_data", type=str, default=None, help="CIFAR-10 binary batches.")
        cifar.add_argument("--epochs", type=int, default=None, help="Training epochs.")
        cifar.add_argument("--subset", type=int, default=None, help="Use only the first N training images.")
        cifar.add_argument("--val-limit", dest="val_limit", type=int, default=None, help="Validation images.")
        cifar.add_argument(
            "--final-lambda-scale",
            dest="final_lambda_scale",
            type=float,
            default=None,
            help="Multiply lambda by this factor for the final epochs.",
        )
        cifar.add_argument(
            "--final-lambda-epochs",
            dest="final_lambda_epochs",
            type=int,
            default=None,
            help="Number of final epochs that use the reduced lambda.",
        )

        init_stats = subparsers.add_parser("init-stats", help="Initialize batchless statistics from a data sample.")
        init_stats.add_argument("--checkpoint", required=True, help="Source checkpoint.")
        init_stats.add_argument("--out", required=True, help="Path of the new checkpoint.")
        init_stats.add_argument("--sample-size", dest="sample_size", type=int, default=None, help="Sample size.")
        init_stats.add_argument("--seed", type=int, default=None, help="Seed of the spiral sample.")
        init_stats.add_argument("--data-dir", dest="cifar_data", type=str, default=None, help="CIFAR-10 batches.")

        migrate = subparsers.add_parser("migrate", help="Migrate a BN or plain checkpoint to batchless normalization.")
        migrate.add_argument("--checkpoint", required=True, help="Source checkpoint.")
        migrate.add_argument("--out", required=True, help="Path of the migrated checkpoint.")
        migrate.add_argument("--mode", choices=["bn", "plain"], default=None, help="Source model kind.")
        migrate.add_argument(
            "--sigma-mode",
            dest="sigma_mode",
            choices=[mode.value for mode in SigmaMode],
            default=None,
            help="Sigma parameterization of the new layers.",
        )
        migrate.add_argument("--sample-size", dest="sample_size", type=int, default=None, help="Sample size.")
        migrate.add_argument(
            "--insert-before",
            dest="insert_before",
            action="append",
            default=None,
            help="Layer name to insert a norm layer before (plain mode). Repeatable; defaults to the norm slots.",
        )
        migrate.add_argument("--check-inputs", type=int, default=None, help="Random inputs for output verification.")
        migrate.add_argument("--seed", type=int, default=None, help="Seed of the sample and check inputs.")
        migrate.add_argument("--data-dir", dest="cifar_data", type=str, default=None, help="CIFAR-10 batches.")

        report = subparsers.add_parser("report", help="Aggregate a per-run results CSV into tables and plots.")
        report.add_argument("--results", required=True, help="Per-run results CSV.")
        report.add_argument("--out-dir", dest="out_dir", default=None, help="Output directory (default: beside input).")
        report.add_argument("--precision", type=int, default=None, help="Significant digits in tables.")

        return parser

    def _add_suite_arguments(self, parser: argparse.ArgumentParser, norm_kinds: Sequence[str]) -> None:
        parser.add_argument(
            "--norm",
            dest="norm_kinds",
            action="append",
            choices=list(norm_kinds),
            default=None,
            help="Normalization kind. Repeatable; defaults to the config list.",
        )
        parser.add_argument(
            "--batch-size",
            dest="batch_sizes",
            action="append",
            type=int,
            default=None,
            help="Batch size. Repeatable; defaults to the config list.",
        )
        parser.add_argument("--runs", type=int, default=None, help="Runs per cell.")
        parser.add_argument("--seed", type=int, default=None, help="Base seed. Drawn from entropy when omitted.")
        parser.add_argument("--lambda", dest="lambda", type=float, default=None, help="Statistics loss weight.")
        parser.add_argument(
            "--lambda-mode",
            dest="lambda_mode",
            choices=["loss", "learning_rate"],
            default=None,
            help="Apply lambda to the loss or as a learning-rate multiplier of mu and sigma.",
        )
        parser.add_argument("--lr", type=float, default=None, help="Learning rate.")
        parser.add_argument("--workers", type=int, default=None, help="Concurrent runs.")

    def get_args(self):
        return self.args

    def overrides(self) -> dict:
        return flag_overrides(self.args)

    def _validate_args(self, args) -> None:
        for name in ("runs", "epochs", "subset", "val_limit", "check_inputs", "patience", "hard_cap", "workers"):
            value = getattr(args, name, None)
            if value is not None and value < 1:
                self.parser.error(f"--{name.replace('_', '-')} must be at least 1.")
        if getattr(args, "sample_size", None) is not None and args.sample_size < 1:
            self.parser.error("--sample-size must be at least 1.")
        for batch_size in getattr(args, "batch_sizes", None) or []:
            if batch_size < 1:
                self.parser.error("--batch-size must be at least 1.")
        if getattr(args, "insert_before", None) and getattr(args, "mode", None) == "bn":
            self.parser.error("--insert-before only applies to --mode plain.")


def flag_overrides(args) -> dict:
    """Flag values keyed by config key; unset flags are None and lose to the config file."""
    return {key: value for key, value in vars(args).items() if key not in COMMAND_ONLY_FLAGS}
