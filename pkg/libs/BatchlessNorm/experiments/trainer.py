"""One-run training loop: forward on the tape, backward, optimizer step."""

from __future__ import annotations

from typing import NamedTuple, Optional

import numpy as np

from BatchlessNorm.core.ops import scale
from BatchlessNorm.core.tape import Tape
from BatchlessNorm.data.sampler import Batch, BatchSampler
from BatchlessNorm.nn.network import Model, total_loss
from BatchlessNorm.nn.normalization import Phase
from BatchlessNorm.nn.optimizers import OptimizerState, apply_weight_decay, is_norm_param, optimizer_step
from BatchlessNorm.utils.errors import ContractError
from BatchlessNorm.utils.logger import NoOpLogger


class StepResult(NamedTuple):
    task_loss: float
    nll_loss: float
    decay_loss: float
    gauged_metrics: dict[str, float]


def batch_gradients(model: Model, batch: Batch, rng: Optional[np.random.Generator]):
    """Gradients of the full-batch total loss.

    Args:
        model: Model whose parameters are differentiated.
        batch: Inputs and labels of one training batch.
        rng: Dropout generator. Masks are drawn once for the whole batch.

    Returns:
        tuple: Gradients keyed by parameter name, and the step's loss breakdown.
    """
    masks = model.dropout_masks(len(batch.labels), rng) if rng is not None else None
    with Tape() as tape:
        out = model.forward(batch.inputs, Phase.TRAIN, rng, masks)
        loss = total_loss(out.logits, batch.labels, out.nll_losses, model.decay_terms())
    grads = tape.backward(loss.total).by_name()
    return grads, StepResult(loss.task, loss.nll, loss.decay, out.gauged_metrics)


def accumulate_gradients(model: Model, batch: Batch, rng: Optional[np.random.Generator]):
    """Sum per-instance gradients of loss / N, then fold in weight decay once.

    Only one instance is ever on the tape. Dropout masks are drawn for the whole batch
    up front and instance ``i`` gets row ``i``, so the result matches
    :func:`batch_gradients` under the same generator state.

    Args:
        model: Model without batch-statistics layers.
        batch: Inputs and labels of one training batch.
        rng: Dropout generator.

    Returns:
        tuple: Gradients keyed by parameter name, and the step's loss breakdown.

    Raises:
        ContractError: If the model has BN or BRN layers.
    """
    if model.batchnorm_states():
        raise ContractError("Batch statistics couple instances; gradients cannot be accumulated per instance.")
    n = len(batch.labels)
    grads: dict[str, np.ndarray] = {name: np.zeros_like(p) for name, p in model.params.items()}
    task = nll = 0.0
    metrics: dict[str, float] = {}
    masks = model.dropout_masks(n, rng) if rng is not None else {}
    for i in range(n):
        rows = {name: mask[i : i + 1] for name, mask in masks.items()}
        with Tape() as tape:
            out = model.forward(batch.inputs[i : i + 1], Phase.TRAIN, rng, rows)
            loss = total_loss(out.logits, batch.labels[i : i + 1], out.nll_losses)
            scaled = scale(loss.total, 1.0 / n)
        for name, grad in tape.backward(scaled).by_name().items():
            grads[name] += grad
        task += loss.task / n
        nll += loss.nll / n
        for layer, value in out.gauged_metrics.items():
            metrics[layer] = metrics.get(layer, 0.0) + value / n

    grads = apply_weight_decay(grads, model.params, model.decay)
    decay = sum(
        0.5 * s * float(np.sum(model.params[name] ** 2)) for name, s in model.decay.items() if not is_norm_param(name)
    )
    return grads, StepResult(task, nll, decay, metrics)


class Trainer:
    """Owns one model's optimizer, sampler and dropout generator."""

    def __init__(
        self,
        model: Model,
        optimizer: OptimizerState,
        sampler: BatchSampler,
        rng: np.random.Generator,
        accumulate: bool = False,
        logger: Optional[object] = None,
    ) -> None:
        self.model = model
        self.optimizer = optimizer
        self.sampler = sampler
        self.rng = rng
        self.accumulate = accumulate
        self.logger = logger if logger is not None else NoOpLogger()
        self.steps = 0

    def step(self) -> StepResult:
        batch = self.sampler.next_batch()
        if self.accumulate:
            grads, result = accumulate_gradients(self.model, batch, self.rng)
        else:
            grads, result = batch_gradients(self.model, batch, self.rng)
        optimizer_step(self.model.params, grads, self.optimizer)
        self.model.check_norm_states()
        self.steps += 1
        if self.steps % 1000 == 0:
            self.logger.debug(f"Step {self.steps}: task loss {result.task_loss:.4f}, nll {result.nll_loss:.4f}")
        return result
