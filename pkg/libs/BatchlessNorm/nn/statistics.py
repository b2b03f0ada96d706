"""Statistics passes over data: BN population stats, batchless init-from-sample and model migration."""

from __future__ import annotations

import copy
from typing import Optional, Sequence

import numpy as np

from BatchlessNorm.nn.checkpoint import Checkpoint, LayerRecord
from BatchlessNorm.nn.network import LayerSpec, Model
from BatchlessNorm.nn.normalization import (
    BATCH_KINDS,
    BATCHLESS_MODES,
    SIGMA_FLOOR,
    Sharing,
    SigmaMode,
    gauged_losses,
    param_from_sigma,
    unit_layout,
)
from BatchlessNorm.utils.errors import ConfigError, ContractError, DegenerateSampleError, MalformedCheckpointError
from BatchlessNorm.utils.logger import NoOpLogger

KIND_FOR_MODE = {mode: kind for kind, mode in BATCHLESS_MODES.items()}


class RunningMoments:
    """Per-unit streaming mean and biased variance, merged chunk by chunk (Chan et al. update)."""

    def __init__(self, units: int) -> None:
        self.count = 0
        self.mean = np.zeros(units)
        self.m2 = np.zeros(units)

    def update(self, values: np.ndarray, axes: tuple[int, ...]) -> None:
        n = int(np.prod([values.shape[a] for a in axes]))
        if n == 0:
            return
        chunk_mean = values.mean(axis=axes)
        view = [1] * values.ndim
        view[1] = chunk_mean.shape[0]
        chunk_m2 = ((values - chunk_mean.reshape(view)) ** 2).sum(axis=axes)

        total = self.count + n
        delta = chunk_mean - self.mean
        self.mean = self.mean + delta * (n / total)
        self.m2 = self.m2 + chunk_m2 + delta * delta * (self.count * n / total)
        self.count = total

    @property
    def variance(self) -> np.ndarray:
        if self.count == 0:
            raise ContractError("No values were accumulated.")
        return self.m2 / self.count

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variance)


def _sharing_for(values: np.ndarray) -> Sharing:
    return Sharing.PER_CHANNEL if values.ndim == 4 else Sharing.PER_FEATURE


def _layer_moments(model: Model, index: int, inputs: np.ndarray, chunk: int) -> RunningMoments:
    moments: Optional[RunningMoments] = None
    for start in range(0, len(inputs), chunk):
        values = model.layer_input(index, inputs[start : start + chunk])
        axes, _ = unit_layout(values, _sharing_for(values), values.shape[1])
        if moments is None:
            moments = RunningMoments(values.shape[1])
        moments.update(values, axes)
    return moments


def _check_std(layer: str, std: np.ndarray) -> None:
    small = np.flatnonzero(std < SIGMA_FLOOR)
    if small.size:
        raise DegenerateSampleError(layer, int(small[0]), float(std[small[0]]))


def finalize_population_stats(model: Model, inputs: np.ndarray, chunk: int = 1000, logger=None) -> None:
    """Set population mean and variance of every BN/BRN layer from the whole dataset.

    Layers are finalized in order, so each one sees its predecessors already in
    eval mode with their own population statistics.
    """
    logger = logger if logger is not None else NoOpLogger()
    layers = model.norm_layers(BATCH_KINDS)
    if not layers:
        raise ContractError("Model has no batch normalization layers to finalize.")
    if len(inputs) == 0:
        raise ContractError("Cannot finalize population statistics on an empty dataset.")

    for _, spec in layers:
        state = model.norm_states[spec.name]
        state.population_mu = None
        state.population_var = None

    for index, spec in layers:
        moments = _layer_moments(model, index, inputs, chunk)
        state = model.norm_states[spec.name]
        state.population_mu = moments.mean
        state.population_var = moments.variance
        logger.debug(f"Finalized population statistics of '{spec.name}' over {moments.count} values per unit.")


def init_from_sample(model: Model, sample: np.ndarray, chunk: int = 1000, logger=None) -> dict[str, tuple]:
    """Set mu and sigma of every batchless layer to the ML estimates of its inputs on ``sample``.

    Layers are visited in order with one pass each, so layer k sees layers before it
    already initialized. Gamma and beta are left untouched.

    Args:
        model: Model whose batchless layers are overwritten in place.
        sample: Network inputs, N x input shape.
        chunk: Instances per forward pass.
        logger: Optional loguru-style logger.

    Returns:
        Layer name -> (mean, std) that was written.

    Raises:
        ContractError: If the sample is empty.
        DegenerateSampleError: If some unit has zero spread on the sample.
    """
    logger = logger if logger is not None else NoOpLogger()
    if len(sample) == 0:
        raise ContractError("Cannot initialize from an empty sample.")

    fitted = {}
    for index, spec in model.norm_layers(tuple(BATCHLESS_MODES)):
        moments = _layer_moments(model, index, sample, chunk)
        std = moments.std
        _check_std(spec.name, std)
        state = model.norm_states[spec.name]
        state.mu[...] = moments.mean
        state.sigma_param[...] = param_from_sigma(std, state.mode)
        fitted[spec.name] = (moments.mean.copy(), std)
        logger.debug(f"Initialized '{spec.name}' from {len(sample)} samples.")
    return fitted


def sample_gauged_metrics(model: Model, inputs: np.ndarray, chunk: int = 1000) -> dict[str, float]:
    """Mean squared gauged loss of every batchless layer over ``inputs``."""
    layers = model.norm_layers(tuple(BATCHLESS_MODES))
    totals = {spec.name: 0.0 for _, spec in layers}
    counts = {spec.name: 0 for _, spec in layers}
    for start in range(0, len(inputs), chunk):
        captured = model.layer_inputs([index for index, _ in layers], inputs[start : start + chunk])
        for index, spec in layers:
            gauged = gauged_losses(captured[index], model.norm_states[spec.name])
            totals[spec.name] += float(np.sum(gauged * gauged))
            counts[spec.name] += gauged.size
    return {name: totals[name] / counts[name] for name in totals if counts[name]}


def migrate_from_batchnorm(
    checkpoint: Checkpoint,
    sigma_mode: SigmaMode = SigmaMode.LOG,
    lam: float = 0.1,
    logger=None,
) -> Checkpoint:
    """Replace every BN/BRN layer by a batchless one with mu = mean and sigma = sqrt(var + eps).

    Population statistics are preferred over the moving ones when present.

    Args:
        checkpoint: Source checkpoint with at least one BN or BRN layer. Not modified.
        sigma_mode: Parametrization of sigma in the new layers.
        lam: Lambda of the new layers.
        logger: Optional loguru-style logger.

    Returns:
        A new checkpoint whose eval-phase outputs match the source up to float error.

    Raises:
        MalformedCheckpointError: If there is nothing to migrate or a layer lacks statistics.
    """
    logger = logger if logger is not None else NoOpLogger()
    if not checkpoint.norm_records(BATCH_KINDS):
        raise MalformedCheckpointError("Checkpoint has no batch normalization layers to migrate.")

    target_kind = KIND_FOR_MODE[sigma_mode]
    layers = []
    for record in checkpoint.layers:
        if record.kind != "norm" or record.params.get("norm_kind") not in BATCH_KINDS:
            layers.append(copy.deepcopy(record))
            continue
        arrays = record.arrays
        if "population_mu" in arrays and "population_var" in arrays:
            mean, var = arrays["population_mu"], arrays["population_var"]
        elif "moving_mu" in arrays and "moving_var" in arrays:
            mean, var = arrays["moving_mu"], arrays["moving_var"]
        else:
            raise MalformedCheckpointError(f"Layer '{record.name}' carries no mean/variance statistics.")
        if "gamma" not in arrays or "beta" not in arrays:
            raise MalformedCheckpointError(f"Layer '{record.name}' is missing gamma or beta.")

        epsilon = float(record.params.get("epsilon", 1e-5))
        sigma = np.sqrt(var + epsilon)
        params = {
            "norm_kind": target_kind,
            "sigma_mode": sigma_mode.value,
            "sharing": record.params.get("sharing", Sharing.PER_FEATURE.value),
            "lam": lam,
            "lambda_in_loss": True,
        }
        layers.append(
            LayerRecord(
                record.name,
                "norm",
                params,
                {
                    "mu": mean.copy(),
                    "sigma": param_from_sigma(sigma, sigma_mode),
                    "gamma": arrays["gamma"].copy(),
                    "beta": arrays["beta"].copy(),
                },
            )
        )
        logger.debug(f"Migrated '{record.name}' from {record.params.get('norm_kind')} to {target_kind}.")

    migrated = copy.deepcopy(checkpoint)
    migrated.layers = layers
    migrated.norm_kind = target_kind
    migrated.metadata["migrated_from"] = checkpoint.norm_kind
    return migrated


def migrate_from_plain(
    checkpoint: Checkpoint,
    sample: np.ndarray,
    insertion_points: Optional[Sequence[str]] = None,
    sigma_mode: SigmaMode = SigmaMode.LOG,
    lam: float = 0.1,
    logger=None,
) -> Checkpoint:
    """Insert batchless layers that leave the network function unchanged.

    Each inserted layer gets mu, sigma from one statistics pass over ``sample`` and
    beta = mu, gamma = sigma, so its output equals its input. ``insertion_points``
    name the layers to insert before; they default to the model's norm slots.

    Args:
        checkpoint: Checkpoint without normalization layers. Not modified.
        sample: Network inputs used for the statistics pass.
        insertion_points: Layer names to insert before, or None for the norm slots.
        sigma_mode: Parametrization of sigma in the new layers.
        lam: Lambda of the new layers.
        logger: Optional loguru-style logger.

    Returns:
        A new checkpoint; inserted layers are named ``norm_<layer>``.

    Raises:
        ContractError: If the sample is empty.
        MalformedCheckpointError: If the source already has normalization layers.
        ConfigError: If an insertion point is unknown or none can be found.
        DegenerateSampleError: If an inserted unit has zero spread on the sample.
    """
    logger = logger if logger is not None else NoOpLogger()
    if len(sample) == 0:
        raise ContractError("Cannot migrate from an empty sample.")
    if checkpoint.norm_records():
        raise MalformedCheckpointError("Plain migration expects a checkpoint without normalization layers.")

    source = Model.from_checkpoint(checkpoint)
    points = list(insertion_points) if insertion_points else [slot["before"] for slot in source.norm_slots]
    if not points:
        raise ConfigError("No insertion points given and the model declares no norm slots.")
    try:
        indices = {name: source.layer_index(name) for name in points}
    except KeyError as exc:
        raise ConfigError(f"Unknown insertion point {exc}.") from exc

    captured = source.layer_inputs(sorted(indices.values()), sample)
    target_kind = KIND_FOR_MODE[sigma_mode]

    specs: list[LayerSpec] = []
    fitted: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for index, spec in enumerate(source.specs):
        if spec.name in indices:
            norm_name = f"norm_{spec.name}"
            values = captured[index]
            axes, _ = unit_layout(values, _sharing_for(values), values.shape[1])
            moments = RunningMoments(values.shape[1])
            moments.update(values, axes)
            std = moments.std
            _check_std(norm_name, std)
            fitted[norm_name] = (moments.mean, std)
            specs.append(
                LayerSpec(
                    "norm",
                    norm_name,
                    {"norm_kind": target_kind, "sigma_mode": sigma_mode.value, "lam": lam, "lambda_in_loss": True},
                )
            )
        specs.append(copy.deepcopy(spec))

    target = Model(
        specs,
        source.input_shape,
        source.seed,
        architecture=source.architecture,
        norm_kind=target_kind,
        decay=source.decay,
        norm_slots=source.norm_slots,
        init_width=source.init_width,
        metadata=source.metadata,
    )
    for name, array in source.params.items():
        target.params[name][...] = array
    for name, (mean, std) in fitted.items():
        state = target.norm_states[name]
        state.mu[...] = mean
        state.sigma_param[...] = param_from_sigma(std, sigma_mode)
        state.gamma[...] = std
        state.beta[...] = mean
        logger.debug(f"Inserted '{name}' with identity transform.")

    migrated = target.to_checkpoint()
    migrated.metadata["migrated_from"] = "plain"
    migrated.metadata["insertion_points"] = points
    return migrated
