"""Spiral and CIFAR experiment suites: per-run protocol, seeding, divergence handling and aggregation."""

from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional

import numpy as np

from BatchlessNorm.data.cifar import load_cifar10
from BatchlessNorm.data.dataset import Dataset
from BatchlessNorm.data.sampler import BatchSampler
from BatchlessNorm.data.spirals import bounding_box, generate_spirals
from BatchlessNorm.experiments.protocol import (
    ConvergenceDetector,
    evaluate_validation,
    fluctuation_grid,
    measure_fluctuation,
)
from BatchlessNorm.experiments.trainer import Trainer
from BatchlessNorm.nn.checkpoint import save_checkpoint
from BatchlessNorm.nn.network import Model, build_cifar_cnn, build_spiral_mlp
from BatchlessNorm.nn.normalization import BATCH_KINDS, BATCHLESS_MODES, NORM_KINDS
from BatchlessNorm.nn.optimizers import make_optimizer
from BatchlessNorm.nn.statistics import finalize_population_stats, init_from_sample
from BatchlessNorm.utils.errors import (
    ConfigError,
    DegenerateParameterError,
    DegenerateSigmaError,
    NonFiniteError,
)
from BatchlessNorm.utils.logger import NoOpLogger

EXPERIMENTS = ("spiral", "cifar")
DIVERGENCE_ERRORS = (NonFiniteError, DegenerateSigmaError, DegenerateParameterError)
LAMBDA_MODES = ("loss", "learning_rate")

STATUS_OK = "ok"
STATUS_DIVERGED = "diverged"
STATUS_INAPPLICABLE = "inapplicable"


@dataclass
class RunConfig:
    experiment: str
    norm_kind: str
    batch_size: int
    seed: int
    run_index: int = 0
    base_seed: int = 0
    # training
    lam: float = 0.1
    lambda_mode: str = "loss"
    optimizer: str = "amsgrad"
    lr: float = 0.01
    dropout_rate: float = 0.1
    weight_decay: float = 1e-6
    init_width: str = "full"
    init_sample_size: int = 1000
    accumulate: bool = False
    # spiral protocol
    patience: int = 1000
    median_window: int = 15
    fluctuation_batches: int = 1000
    hard_cap: int = 20000
    grid_size: int = 8
    report_train_loss: bool = False
    trace_every: int = 100
    # cifar scale
    epochs: int = 5
    eval_chunk: int = 50
    final_lambda_scale: float = 1.0
    final_lambda_epochs: int = 0

    def __post_init__(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"Unknown experiment '{self.experiment}'.")
        if self.norm_kind not in NORM_KINDS:
            raise ConfigError(f"Unknown norm kind '{self.norm_kind}'. Expected one of {NORM_KINDS}.")
        if self.batch_size < 1:
            raise ConfigError(f"Batch size must be at least 1, got {self.batch_size}.")
        if self.patience < self.median_window:
            raise ConfigError("Convergence patience must be at least the median window.")
        if self.lambda_mode not in LAMBDA_MODES:
            raise ConfigError(f"lambda_mode must be one of {LAMBDA_MODES}, got '{self.lambda_mode}'.")

    @classmethod
    def from_settings(
        cls,
        experiment: str,
        settings: Mapping[str, Any],
        norm_kind: str,
        batch_size: int,
        run_index: int,
        base_seed: int,
    ) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        values = {key: value for key, value in settings.items() if key in known}
        if "lambda" in settings:
            values["lam"] = settings["lambda"]
        values.update(
            experiment=experiment,
            norm_kind=norm_kind,
            batch_size=int(batch_size),
            run_index=int(run_index),
            base_seed=int(base_seed),
            seed=derive_seed(base_seed, norm_kind, batch_size, run_index),
        )
        return cls(**values)

    @property
    def inapplicable(self) -> bool:
        return self.norm_kind in BATCH_KINDS and self.batch_size == 1

    @property
    def tag(self) -> str:
        return f"{self.experiment}_{self.norm_kind}_b{self.batch_size}_r{self.run_index}"

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class RunResult:
    config: RunConfig
    status: str = STATUS_OK
    val_loss: Optional[float] = None
    val_acc: Optional[float] = None
    train_loss: Optional[float] = None
    converged: bool = False
    batches_to_convergence: Optional[int] = None
    fluctuation: Optional[float] = None
    max_val_acc: Optional[float] = None
    min_val_loss: Optional[float] = None
    loss_trace: list[tuple[int, float]] = field(default_factory=list)
    gauged_traces: dict[str, list[tuple[int, float]]] = field(default_factory=dict)
    epoch_trace: list[dict[str, Any]] = field(default_factory=list)
    checkpoint: Optional[str] = None
    error: Optional[str] = None
    metadata: dict[str, Any] = field(default_factory=dict)


def resolve_seed(seed: Optional[int]) -> int:
    """``seed`` itself, or a fresh 32-bit seed from OS entropy when None."""
    if seed is not None:
        return int(seed)
    return int(np.random.SeedSequence().generate_state(1)[0])


def derive_seed(base_seed: int, norm_kind: str, batch_size: int, run_index: int) -> int:
    """Per-run seed that depends only on the cell and run index, never on execution order."""
    entropy = [int(base_seed), NORM_KINDS.index(norm_kind), int(batch_size), int(run_index)]
    sequence = np.random.SeedSequence(entropy)
    return int(sequence.generate_state(1)[0])


def _run_streams(seed: int) -> dict[str, Any]:
    model_seq, sampler_seq, dropout_seq, init_seq = np.random.SeedSequence(seed).spawn(4)
    return {
        "model_seed": int(model_seq.generate_state(1)[0]),
        "sampler_seed": sampler_seq,
        "dropout_rng": np.random.default_rng(dropout_seq),
        "init_rng": np.random.default_rng(init_seq),
    }


def _interpretations(config: RunConfig) -> dict[str, Any]:
    return {
        "dropout_rate_is_drop_probability": True,
        "dense_biases": True,
        "init_width": config.init_width,
        "convergence_counted_from_batch": 1,
        "fluctuation_snapshot_phase": "eval",
        "lambda_mode": config.lambda_mode,
    }


def _save(model: Model, config: RunConfig, output_dir: Optional[Path], result: RunResult) -> None:
    if output_dir is None:
        return
    checkpoint = model.to_checkpoint()
    checkpoint.metadata.update(run=config.as_dict(), status=result.status)
    path = save_checkpoint(checkpoint, Path(output_dir) / "checkpoints" / f"{config.tag}.json")
    result.checkpoint = str(path)


def _record_metrics(result: RunResult, batch: int, metrics: Mapping[str, float]) -> None:
    for layer, value in metrics.items():
        result.gauged_traces.setdefault(layer, []).append((batch, float(value)))


def run_spiral(
    config: RunConfig,
    train: Dataset,
    val: Dataset,
    output_dir: Optional[Path] = None,
    logger=None,
) -> RunResult:
    """Train to convergence, measure fluctuation over further training, then validate.

    Batch statistics cannot be computed from a single instance, so BN and BRN at batch
    size 1 come back as inapplicable without training. A divergence error ends the run
    with status diverged instead of raising.

    Args:
        config: One cell of the grid plus its derived seed.
        train: Training spirals; only read.
        val: Validation spirals.
        output_dir: Where the final checkpoint goes, or None to skip saving.
        logger: Optional loguru-style logger; bound to the run tag.

    Returns:
        RunResult with the convergence batch, fluctuation, validation loss and traces.
    """
    logger = (logger if logger is not None else NoOpLogger()).for_run(config.tag)
    result = RunResult(config, metadata=_interpretations(config))
    if config.inapplicable:
        logger.warning("Batch statistics need more than one instance; cell is inapplicable.")
        result.status = STATUS_INAPPLICABLE
        return result

    streams = _run_streams(config.seed)
    model = build_spiral_mlp(
        config.norm_kind,
        streams["model_seed"],
        lam=config.lam,
        lambda_in_loss=config.lambda_mode == "loss",
        dropout_rate=config.dropout_rate,
        weight_decay=config.weight_decay,
        init_width=config.init_width,
    )
    try:
        if config.norm_kind in BATCHLESS_MODES and config.init_sample_size > 0:
            # Spiral instances are stored class by class, so draw the sample at random.
            size = min(config.init_sample_size, len(train))
            picks = streams["init_rng"].choice(len(train), size=size, replace=False)
            init_from_sample(model, train.inputs[picks], logger=logger)

        trainer = Trainer(
            model,
            make_optimizer(config.optimizer, config.lr, model.lr_multipliers()),
            BatchSampler(train, config.batch_size, streams["sampler_seed"], mode="iid"),
            streams["dropout_rng"],
            accumulate=config.accumulate,
            logger=logger,
        )
        detector = ConvergenceDetector(config.patience, config.median_window)
        while not detector.converged and detector.batch < config.hard_cap:
            step = trainer.step()
            detector.update(step.task_loss)
            if detector.batch % config.trace_every == 0:
                result.loss_trace.append((detector.batch, step.task_loss))
                _record_metrics(result, detector.batch, step.gauged_metrics)
        result.converged = detector.converged
        result.batches_to_convergence = detector.converged_at
        if not detector.converged:
            logger.warning(f"No convergence within {config.hard_cap} batches.")

        sites = fluctuation_grid(*bounding_box(train), size=config.grid_size)
        result.fluctuation = measure_fluctuation(model, sites, config.fluctuation_batches, trainer.step)

        if model.batchnorm_states():
            finalize_population_stats(model, train.inputs, logger=logger)
        result.val_loss, result.val_acc = evaluate_validation(model, val)
        if config.report_train_loss:
            result.train_loss, _ = evaluate_validation(model, train)
    except DIVERGENCE_ERRORS as exc:
        logger.warning(f"Training diverged ({exc}).")
        result.status = STATUS_DIVERGED
        result.error = str(exc)
        return result

    _save(model, config, output_dir, result)
    logger.info(
        f"Converged at {result.batches_to_convergence}, val loss {result.val_loss:.4f}, "
        f"fluctuation {result.fluctuation:.4f}"
    )
    return result


def run_cifar(
    config: RunConfig,
    train: Dataset,
    val: Dataset,
    output_dir: Optional[Path] = None,
    logger=None,
) -> RunResult:
    """Train for a fixed number of epochs, validating after each one.

    Returns:
        RunResult whose ``epoch_trace`` holds validation loss, accuracy and the mean gauged
        metrics of each epoch.
    """
    logger = (logger if logger is not None else NoOpLogger()).for_run(config.tag)
    result = RunResult(config, metadata=_interpretations(config))
    if config.norm_kind == "brn":
        raise ConfigError("The CIFAR network has no batch renormalization variant.")
    if config.inapplicable:
        logger.warning("Batch statistics need more than one instance; cell is inapplicable.")
        result.status = STATUS_INAPPLICABLE
        return result

    streams = _run_streams(config.seed)
    model = build_cifar_cnn(
        config.norm_kind,
        streams["model_seed"],
        lam=config.lam,
        lambda_in_loss=config.lambda_mode == "loss",
        dropout_rate=config.dropout_rate,
        weight_decay=config.weight_decay,
        init_width=config.init_width,
    )
    sampler = BatchSampler(train, config.batch_size, streams["sampler_seed"], mode="epoch")
    try:
        if config.norm_kind in BATCHLESS_MODES and config.init_sample_size > 0:
            sample = train.inputs[: config.init_sample_size]
            logger.info(f"Initialization pass over the first {len(sample)} training samples.")
            init_from_sample(model, sample, chunk=config.eval_chunk, logger=logger)

        trainer = Trainer(
            model,
            make_optimizer(config.optimizer, config.lr, model.lr_multipliers()),
            sampler,
            streams["dropout_rng"],
            accumulate=config.accumulate,
            logger=logger,
        )
        for epoch in range(1, config.epochs + 1):
            if config.final_lambda_epochs and epoch == config.epochs - config.final_lambda_epochs + 1:
                model.set_lambda(config.lam * config.final_lambda_scale)
                logger.info(f"Lambda reduced to {config.lam * config.final_lambda_scale:g}.")
            sums: dict[str, float] = {}
            with logger.progress_bar(sampler.batches_per_epoch, f"{config.tag} epoch {epoch}") as progress:
                for _ in range(sampler.batches_per_epoch):
                    step = trainer.step()
                    for layer, value in step.gauged_metrics.items():
                        sums[layer] = sums.get(layer, 0.0) + value
                    progress.update(1)

            if model.batchnorm_states():
                finalize_population_stats(model, train.inputs, chunk=config.eval_chunk, logger=logger)
            val_loss, val_acc = evaluate_validation(model, val, chunk=config.eval_chunk)
            row = {"epoch": epoch, "val_loss": val_loss, "val_acc": val_acc}
            row.update({layer: total / sampler.batches_per_epoch for layer, total in sums.items()})
            result.epoch_trace.append(row)
            logger.info(f"Epoch {epoch}: val loss {val_loss:.4f}, val acc {val_acc:.4f}")
    except DIVERGENCE_ERRORS as exc:
        logger.warning(f"Training diverged ({exc}).")
        result.status = STATUS_DIVERGED
        result.error = str(exc)
    finally:
        if result.epoch_trace:
            result.max_val_acc = max(row["val_acc"] for row in result.epoch_trace)
            result.min_val_loss = min(row["val_loss"] for row in result.epoch_trace)
            result.val_loss = result.epoch_trace[-1]["val_loss"]
            result.val_acc = result.epoch_trace[-1]["val_acc"]

    if result.status == STATUS_OK:
        _save(model, config, output_dir, result)
    return result


@dataclass
class SuiteResult:
    experiment: str
    base_seed: int
    settings: dict[str, Any]
    results: list[RunResult]

    def cell(self, norm_kind: str, batch_size: int) -> list[RunResult]:
        return [
            r for r in self.results if r.config.norm_kind == norm_kind and r.config.batch_size == batch_size
        ]

    def fully_diverged_cells(self) -> list[tuple[str, int]]:
        cells = []
        for key in dict.fromkeys((r.config.norm_kind, r.config.batch_size) for r in self.results):
            runs = self.cell(*key)
            if runs and all(r.status == STATUS_DIVERGED for r in runs):
                cells.append(key)
        return cells


def _run_configs(experiment: str, settings: Mapping[str, Any], base_seed: int) -> list[RunConfig]:
    return [
        RunConfig.from_settings(experiment, settings, norm_kind, batch_size, run_index, base_seed)
        for norm_kind in settings["norm_kinds"]
        for batch_size in settings["batch_sizes"]
        for run_index in range(int(settings["runs"]))
    ]


def _execute(configs, run_one, workers: int, logger) -> list[RunResult]:
    logger.info(f"Running {len(configs)} runs on {max(workers, 1)} worker(s).")
    if workers <= 1:
        return [run_one(config) for config in configs]
    with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="run") as executor:
        futures = [executor.submit(run_one, config) for config in configs]
        return [future.result() for future in futures]


def run_spiral_suite(settings: Mapping[str, Any], output_dir: Optional[Path] = None, logger=None) -> SuiteResult:
    """Every (norm kind, batch size, run) of the spiral grid; datasets are shared read-only.

    Args:
        settings: Resolved "spiral" settings of the experiment config.
        output_dir: Checkpoint directory, or None.
        logger: Optional loguru-style logger.

    Returns:
        SuiteResult in grid order, whatever the number of workers.
    """
    logger = logger if logger is not None else NoOpLogger()
    base_seed = resolve_seed(settings.get("seed"))
    logger.info(f"Spiral suite base seed: {base_seed}")
    train, val = generate_spirals(
        int(settings["n_train_per_class"]),
        int(settings["n_val_per_class"]),
        base_seed,
        turns=float(settings["turns"]),
        noise=float(settings["noise"]),
        r_max=float(settings["r_max"]),
    )
    configs = _run_configs("spiral", settings, base_seed)
    results = _execute(
        configs,
        lambda config: run_spiral(config, train, val, output_dir, logger),
        int(settings.get("workers", 1)),
        logger,
    )
    return SuiteResult("spiral", base_seed, dict(settings), results)


def run_cifar_suite(
    settings: Mapping[str, Any],
    data_dir: Path,
    output_dir: Optional[Path] = None,
    logger=None,
) -> SuiteResult:
    """Reduced-scale CIFAR-10 runs on the first ``subset`` training images.

    Raises:
        IngestionError: If ``data_dir`` lacks the binary batches or one is corrupt.
    """
    logger = logger if logger is not None else NoOpLogger()
    base_seed = resolve_seed(settings.get("seed"))
    logger.info(f"CIFAR suite base seed: {base_seed}")
    subset = settings.get("subset")
    train, val = load_cifar10(data_dir, limit=subset, val_limit=settings.get("val_limit"))
    logger.info(f"Loaded {len(train)} training and {len(val)} validation images from {data_dir}.")
    configs = _run_configs("cifar", settings, base_seed)
    results = _execute(
        configs,
        lambda config: run_cifar(config, train, val, output_dir, logger),
        int(settings.get("workers", 1)),
        logger,
    )
    return SuiteResult("cifar", base_seed, dict(settings), results)
