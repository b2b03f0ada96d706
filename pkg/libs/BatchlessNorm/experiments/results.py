"""Result files: per-run CSV, aggregated tables (rows = batch sizes, columns = norm kinds) and traces.

Every file starts with ``# key: value`` lines carrying the resolved configuration,
so each number can be replayed from the file alone.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from BatchlessNorm.experiments.suites import STATUS_DIVERGED, STATUS_INAPPLICABLE, STATUS_OK, RunResult
from BatchlessNorm.nn.normalization import NORM_KINDS
from BatchlessNorm.utils.errors import SchemaError

RUN_COLUMNS = (
    "experiment",
    "norm_kind",
    "batch_size",
    "run_index",
    "seed",
    "status",
    "val_loss",
    "val_acc",
    "train_loss",
    "converged",
    "batches_to_convergence",
    "fluctuation",
    "max_val_acc",
    "min_val_loss",
    "checkpoint",
)
OPTIONAL_COLUMNS = ("train_loss", "checkpoint")
TABLE_METRICS = {
    "spiral": ("val_loss", "batches_to_convergence", "fluctuation", "train_loss"),
    "cifar": ("max_val_acc", "min_val_loss"),
}
INAPPLICABLE_MARK = "-"
DIVERGED_MARK = "diverged"


def format_value(value: Any, precision: int = 9) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.{precision}g}"
    return str(value)


def header_lines(metadata: Mapping[str, Any]) -> str:
    """One sorted `# key: json` line per metadata entry."""
    return "".join(f"# {key}: {json.dumps(metadata[key], sort_keys=True, default=str)}\n" for key in sorted(metadata))


def _write_text(path: Union[str, Path], text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(text)
    return path


def _render_rows(columns: Sequence[str], rows: Iterable[Mapping[str, Any]], delimiter: str = ",") -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, delimiter=delimiter, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([row.get(column, "") for column in columns])
    return buffer.getvalue()


def run_row(result: RunResult, precision: int = 9) -> dict[str, str]:
    config = result.config
    values = {
        "experiment": config.experiment,
        "norm_kind": config.norm_kind,
        "batch_size": config.batch_size,
        "run_index": config.run_index,
        "seed": config.seed,
        "status": result.status,
        "val_loss": result.val_loss,
        "val_acc": result.val_acc,
        "train_loss": result.train_loss,
        "converged": result.converged,
        "batches_to_convergence": result.batches_to_convergence,
        "fluctuation": result.fluctuation,
        "max_val_acc": result.max_val_acc,
        "min_val_loss": result.min_val_loss,
        "checkpoint": result.checkpoint,
    }
    return {key: format_value(value, precision) for key, value in values.items()}


def write_runs_csv(
    results: Sequence[RunResult], path: Union[str, Path], metadata: Mapping[str, Any], precision: int = 9
) -> Path:
    rows = [run_row(r, precision) for r in results]
    return _write_text(path, header_lines(metadata) + _render_rows(RUN_COLUMNS, rows))


def read_runs_csv(path: Union[str, Path]) -> tuple[list[dict[str, str]], dict[str, Any]]:
    """Rows and header metadata of a per-run CSV; missing required columns raise SchemaError."""
    path = Path(path)
    metadata: dict[str, Any] = {}
    body = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        for line in f:
            if line.startswith("# "):
                key, _, value = line[2:].rstrip("\n").partition(": ")
                metadata[key] = json.loads(value) if value else None
            else:
                body.append(line)
    reader = csv.DictReader(body)
    columns = reader.fieldnames or []
    missing = [c for c in RUN_COLUMNS if c not in columns and c not in OPTIONAL_COLUMNS]
    if missing:
        raise SchemaError(path.name, missing)
    return list(reader), metadata


@dataclass
class Table:
    """One metric laid out with batch sizes as rows and norm kinds as columns."""

    metric: str
    batch_sizes: list[int]
    norm_kinds: list[str]
    cells: dict[tuple[int, str], str] = field(default_factory=dict)
    diverged: dict[tuple[int, str], int] = field(default_factory=dict)

    def value(self, batch_size: int, norm_kind: str) -> str:
        return self.cells.get((batch_size, norm_kind), "")

    def render(self) -> str:
        rows = []
        for batch_size in self.batch_sizes:
            row = {"batch_size": str(batch_size)}
            row.update({kind: self.value(batch_size, kind) for kind in self.norm_kinds})
            rows.append(row)
        return _render_rows(["batch_size"] + self.norm_kinds, rows)


def aggregate(rows: Sequence[Mapping[str, str]], metric: str, precision: int = 9) -> Table:
    """Mean of ``metric`` over successful runs per cell; diverged runs are counted, not averaged."""
    batch_sizes = sorted({int(r["batch_size"]) for r in rows})
    present = {r["norm_kind"] for r in rows}
    norm_kinds = [k for k in NORM_KINDS if k in present] + sorted(present - set(NORM_KINDS))
    table = Table(metric, batch_sizes, norm_kinds)

    groups: dict[tuple[int, str], list[Mapping[str, str]]] = {}
    for r in rows:
        groups.setdefault((int(r["batch_size"]), r["norm_kind"]), []).append(r)

    for key, runs in groups.items():
        statuses = [r["status"] for r in runs]
        values = [float(r[metric]) for r in runs if r["status"] == STATUS_OK and r.get(metric, "") != ""]
        diverged = statuses.count(STATUS_DIVERGED)
        if diverged:
            table.diverged[key] = diverged
        if all(s == STATUS_INAPPLICABLE for s in statuses):
            table.cells[key] = INAPPLICABLE_MARK
        elif values:
            table.cells[key] = format_value(float(np.mean(values)), precision)
        elif diverged:
            table.cells[key] = DIVERGED_MARK
    return table


def tables_for(rows: Sequence[Mapping[str, str]], precision: int = 9) -> list[Table]:
    experiments = {r["experiment"] for r in rows}
    metrics: list[str] = []
    for experiment in sorted(experiments):
        for metric in TABLE_METRICS.get(experiment, ()):
            if any(r.get(metric, "") != "" for r in rows) and metric not in metrics:
                metrics.append(metric)
    return [aggregate(rows, metric, precision) for metric in metrics]


def write_table_csv(table: Table, path: Union[str, Path], metadata: Mapping[str, Any]) -> Path:
    header = dict(metadata)
    header["metric"] = table.metric
    header["diverged_runs"] = {f"{kind}@{bs}": n for (bs, kind), n in sorted(table.diverged.items())}
    return _write_text(path, header_lines(header) + table.render())


def write_loss_traces_tsv(results: Sequence[RunResult], path: Union[str, Path], metadata: Mapping[str, Any]) -> Path:
    """Task loss against batch index for every run, tab separated."""
    rows = []
    for result in results:
        for batch, loss in result.loss_trace:
            rows.append(
                {
                    "norm_kind": result.config.norm_kind,
                    "batch_size": result.config.batch_size,
                    "run_index": result.config.run_index,
                    "batch": batch,
                    "task_loss": format_value(loss),
                }
            )
    columns = ["norm_kind", "batch_size", "run_index", "batch", "task_loss"]
    return _write_text(path, header_lines(metadata) + _render_rows(columns, rows, delimiter="\t"))


def write_epoch_traces_csv(
    results: Sequence[RunResult], path: Union[str, Path], metadata: Mapping[str, Any]
) -> Path:
    """Per-epoch validation loss, accuracy and mean gauged metric of every norm layer."""
    layers: list[str] = []
    for result in results:
        for row in result.epoch_trace:
            for key in row:
                if key not in ("epoch", "val_loss", "val_acc") and key not in layers:
                    layers.append(key)
    columns = ["norm_kind", "batch_size", "run_index", "epoch", "val_loss", "val_acc"]
    columns += [f"mean_gauged_metric_{layer}" for layer in layers]
    rows = []
    for result in results:
        for trace in result.epoch_trace:
            row = {
                "norm_kind": result.config.norm_kind,
                "batch_size": result.config.batch_size,
                "run_index": result.config.run_index,
            }
            row.update({key: format_value(trace[key]) for key in ("epoch", "val_loss", "val_acc")})
            row.update({f"mean_gauged_metric_{layer}": format_value(trace.get(layer)) for layer in layers})
            rows.append(row)
    return _write_text(path, header_lines(metadata) + _render_rows(columns, rows))


def epoch_series(results: Sequence[RunResult], key: str) -> dict[str, list[tuple[float, float]]]:
    """Mean of ``key`` per epoch for every (norm kind, batch size) cell, for plotting."""
    grouped: dict[str, dict[int, list[float]]] = {}
    for result in results:
        label = f"{result.config.norm_kind} b{result.config.batch_size}"
        for row in result.epoch_trace:
            grouped.setdefault(label, {}).setdefault(row["epoch"], []).append(row[key])
    return {
        label: [(float(epoch), float(np.mean(values))) for epoch, values in sorted(epochs.items())]
        for label, epochs in grouped.items()
    }


def table_series(table: Table) -> dict[str, list[tuple[float, float]]]:
    """Numeric cells of ``table`` as one series per norm kind against batch size."""
    series: dict[str, list[tuple[float, float]]] = {}
    for kind in table.norm_kinds:
        points = []
        for batch_size in table.batch_sizes:
            cell = table.value(batch_size, kind)
            try:
                points.append((float(batch_size), float(cell)))
            except ValueError:
                continue
        if points:
            series[kind] = points
    return series


def suite_metadata(command: str, resolved: Mapping[str, Any], base_seed: Optional[int] = None) -> dict[str, Any]:
    metadata = {"command": command, "paths": resolved.get("paths", {}), "settings": resolved.get("settings", {})}
    if base_seed is not None:
        metadata["base_seed"] = base_seed
    return metadata
