"""Command handlers. Each takes the parsed args, the resolved config and a logger, and returns an exit code."""

from __future__ import annotations

from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from BatchlessNorm.cli.plots import svg_line_chart, write_svg
from BatchlessNorm.data.cifar import load_cifar10
from BatchlessNorm.data.spirals import SPIRAL_CLASSES, generate_spirals
from BatchlessNorm.experiments.results import (
    epoch_series,
    read_runs_csv,
    run_row,
    suite_metadata,
    table_series,
    tables_for,
    write_epoch_traces_csv,
    write_loss_traces_tsv,
    write_runs_csv,
    write_table_csv,
)
from BatchlessNorm.experiments.suites import SuiteResult, run_cifar_suite, run_spiral_suite
from BatchlessNorm.nn.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from BatchlessNorm.nn.network import Model
from BatchlessNorm.nn.normalization import SigmaMode
from BatchlessNorm.nn.statistics import (
    init_from_sample,
    migrate_from_batchnorm,
    migrate_from_plain,
    sample_gauged_metrics,
)
from BatchlessNorm.utils.errors import ConfigError

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

METRIC_LABELS = {
    "val_loss": "validation loss",
    "train_loss": "training loss",
    "batches_to_convergence": "batches until convergence",
    "fluctuation": "average output fluctuation",
    "max_val_acc": "maximum validation accuracy",
    "min_val_loss": "minimum validation loss",
}


def _write_tables(rows, out_dir: Path, stem: str, metadata: Mapping[str, Any], precision: int = 9) -> list:
    tables = tables_for(rows, precision)
    for table in tables:
        label = METRIC_LABELS.get(table.metric, table.metric)
        write_table_csv(table, out_dir / f"{stem}_{table.metric}.csv", metadata)
        write_svg(
            out_dir / f"{stem}_{table.metric}.svg",
            svg_line_chart(table_series(table), label, "batch size", label, log_x=True, metadata=metadata),
        )
    return tables


def _suite_exit(suite: SuiteResult, logger) -> int:
    failed = suite.fully_diverged_cells()
    for norm_kind, batch_size in failed:
        logger.error(f"Every run of cell ({norm_kind}, batch {batch_size}) diverged.")
    return EXIT_FAILURE if failed else EXIT_OK


def cmd_spiral(args, config: Mapping[str, Any], logger) -> int:
    output = Path(config["paths"]["output"])
    suite = run_spiral_suite(config["settings"], output, logger)
    print(f"Base seed: {suite.base_seed}")

    metadata = suite_metadata("spiral", config, suite.base_seed)
    write_runs_csv(suite.results, output / "spiral_runs.csv", metadata)
    write_loss_traces_tsv(suite.results, output / "spiral_loss_traces.tsv", metadata)
    for table in _write_tables([run_row(r) for r in suite.results], output, "spiral", metadata):
        print(f"\n{METRIC_LABELS.get(table.metric, table.metric)}\n{table.render()}", end="")
    logger.info(f"Spiral results written to {output}")
    return _suite_exit(suite, logger)


def cmd_cifar(args, config: Mapping[str, Any], logger) -> int:
    output = Path(config["paths"]["output"])
    suite = run_cifar_suite(config["settings"], Path(config["paths"]["cifar_data"]), output, logger)
    print(f"Base seed: {suite.base_seed}")

    metadata = suite_metadata("cifar", config, suite.base_seed)
    write_runs_csv(suite.results, output / "cifar_runs.csv", metadata)
    write_epoch_traces_csv(suite.results, output / "cifar_epoch_traces.csv", metadata)
    for key, label in (("val_loss", "validation loss"), ("val_acc", "validation accuracy")):
        chart = svg_line_chart(epoch_series(suite.results, key), label, "epoch", label, metadata=metadata)
        write_svg(output / f"cifar_{key}.svg", chart)
    for table in _write_tables([run_row(r) for r in suite.results], output, "cifar", metadata):
        print(f"\n{METRIC_LABELS.get(table.metric, table.metric)}\n{table.render()}", end="")
    logger.info(f"CIFAR results written to {output}")
    return _suite_exit(suite, logger)


def _sample_inputs(checkpoint: Checkpoint, size: int, seed: int, paths: Mapping[str, Any]) -> np.ndarray:
    """Training inputs matching the checkpoint's architecture."""
    if checkpoint.architecture == "spiral_mlp":
        per_class = -(-size // SPIRAL_CLASSES)
        train, _ = generate_spirals(per_class, 1, seed)
        picks = np.random.default_rng(seed).choice(len(train), size=size, replace=False)
        return train.inputs[picks]
    if checkpoint.architecture == "cifar_cnn":
        train, _ = load_cifar10(paths["cifar_data"], limit=size, val_limit=1)
        return np.asarray(train.inputs)
    raise ConfigError(f"No sample source for architecture '{checkpoint.architecture}'.")


def _check_inputs(input_shape: Sequence[int], count: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    if len(input_shape) == 3:
        return rng.uniform(0.0, 1.0, (count,) + tuple(input_shape))
    return rng.uniform(-1.5, 1.5, (count,) + tuple(input_shape))


def output_difference(source: Model, target: Model, inputs: np.ndarray, chunk: int = 50) -> float:
    """Max abs difference of eval-phase logits."""
    worst = 0.0
    for start in range(0, len(inputs), chunk):
        batch = inputs[start : start + chunk]
        a = source.forward(batch).logits.data
        b = target.forward(batch).logits.data
        worst = max(worst, float(np.max(np.abs(a - b))))
    return worst


def cmd_init_stats(args, config: Mapping[str, Any], logger) -> int:
    settings = config["settings"]
    checkpoint = load_checkpoint(args.checkpoint)
    model = Model.from_checkpoint(checkpoint)
    if not model.batchless_states():
        logger.warning(f"{args.checkpoint} has no batchless normalization layers; nothing to initialize.")

    sample = _sample_inputs(checkpoint, int(settings["sample_size"]), int(settings["seed"]), config["paths"])
    before = sample_gauged_metrics(model, sample)
    init_from_sample(model, sample, logger=logger)
    after = sample_gauged_metrics(model, sample)
    for layer in before:
        print(f"{layer}: gauged metric {before[layer]:.6g} -> {after[layer]:.6g}")

    result = model.to_checkpoint()
    result.metadata["init_stats"] = {
        "sample_size": len(sample),
        "seed": int(settings["seed"]),
        "source": args.checkpoint,
    }
    save_checkpoint(result, args.out)
    logger.info(f"Initialized checkpoint written to {args.out}")
    return EXIT_OK


def cmd_migrate(args, config: Mapping[str, Any], logger) -> int:
    settings = config["settings"]
    mode = settings["mode"]
    sigma_mode = SigmaMode(settings["sigma_mode"])
    seed = int(settings["seed"])
    checkpoint = load_checkpoint(args.checkpoint)

    if mode == "bn":
        if args.insert_before:
            raise ConfigError("--insert-before only applies to plain migration.")
        migrated = migrate_from_batchnorm(checkpoint, sigma_mode, logger=logger)
    else:
        sample = _sample_inputs(checkpoint, int(settings["sample_size"]), seed, config["paths"])
        migrated = migrate_from_plain(checkpoint, sample, args.insert_before, sigma_mode, logger=logger)

    inputs = _check_inputs(checkpoint.input_shape, int(settings["check_inputs"]), seed)
    difference = output_difference(Model.from_checkpoint(checkpoint), Model.from_checkpoint(migrated), inputs)
    tolerance = float(settings["tolerance"])
    print(f"Max abs output difference on {len(inputs)} check inputs: {difference:.3e}")

    migrated.metadata["verification"] = {
        "check_inputs": len(inputs),
        "seed": seed,
        "max_abs_difference": difference,
        "tolerance": tolerance,
    }
    save_checkpoint(migrated, args.out)
    if difference > tolerance:
        logger.error(f"Migration changed outputs by {difference:.3e}, above tolerance {tolerance:g}.")
        return EXIT_FAILURE
    logger.info(f"Migrated checkpoint written to {args.out}")
    return EXIT_OK


def cmd_report(args, config: Mapping[str, Any], logger) -> int:
    results = Path(args.results)
    rows, metadata = read_runs_csv(results)
    out_dir = Path(args.out_dir) if args.out_dir else results.parent
    precision = int(config["settings"]["precision"])
    for table in _write_tables(rows, out_dir, results.stem, metadata, precision):
        print(f"\n{METRIC_LABELS.get(table.metric, table.metric)}\n{table.render()}", end="")
    logger.info(f"Report for {results.name} written to {out_dir}")
    return EXIT_OK


COMMAND_HANDLERS = {
    "spiral": cmd_spiral,
    "cifar": cmd_cifar,
    "init-stats": cmd_init_stats,
    "migrate": cmd_migrate,
    "report": cmd_report,
}
