"""Normalization layers: batchless normalization and the batch (re)normalization baselines."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple, Optional, Union

import numpy as np

from BatchlessNorm.core import ops
from BatchlessNorm.core.ops import as_tensor, stop_gradient
from BatchlessNorm.core.tape import Tensor, parameter
from BatchlessNorm.utils.errors import (
    ConfigError,
    DegenerateParameterError,
    DegenerateSigmaError,
    DimensionError,
    InsufficientBatchError,
)

SIGMA_FLOOR = 1e-12
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class SigmaMode(Enum):
    """How the learnable parameter p encodes sigma."""

    DIRECT = "direct"  # p = sigma
    LOG = "log"  # p = log sigma
    INVERSE = "inverse"  # p = 1 / sigma


class Sharing(Enum):
    PER_FEATURE = "per-feature"
    PER_CHANNEL = "per-channel"


class Phase(str, Enum):
    TRAIN = "train"
    EVAL = "eval"


NORM_KINDS = ("none", "bn", "brn", "bin", "binlog", "bininv")
BATCHLESS_MODES = {"bin": SigmaMode.DIRECT, "binlog": SigmaMode.LOG, "bininv": SigmaMode.INVERSE}
BATCH_KINDS = ("bn", "brn")

ArrayOrTensor = Union[np.ndarray, Tensor]


def sigma_from_param(p: ArrayOrTensor, mode: SigmaMode) -> ArrayOrTensor:
    """Map a sigma parameter to sigma. DIRECT keeps the sign; only the log term takes |sigma|."""
    values = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
    if mode is SigmaMode.INVERSE and np.any(values == 0.0):
        unit = int(np.flatnonzero(values.reshape(-1) == 0.0)[0])
        raise DegenerateParameterError(f"INVERSE sigma parameter is zero at unit {unit}.")

    if isinstance(p, Tensor):
        if mode is SigmaMode.DIRECT:
            return p
        if mode is SigmaMode.LOG:
            return ops.exp(p)
        return ops.div(1.0, p)

    if mode is SigmaMode.DIRECT:
        return values
    if mode is SigmaMode.LOG:
        return np.exp(values)
    return 1.0 / values


def param_from_sigma(sigma: np.ndarray, mode: SigmaMode) -> np.ndarray:
    """Inverse of ``sigma_from_param`` for strictly positive sigma."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(np.abs(sigma) < SIGMA_FLOOR):
        raise DegenerateSigmaError("Cannot encode a sigma below the sigma floor.")
    if mode is SigmaMode.DIRECT:
        return sigma.copy()
    if mode is SigmaMode.LOG:
        return np.log(np.abs(sigma))
    return 1.0 / sigma


@dataclass
class NormLayerState:
    """Learnable statistics (mu, sigma parameter) and affine (gamma, beta) of one batchless layer."""

    name: str
    mu: np.ndarray
    sigma_param: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    mode: SigmaMode = SigmaMode.LOG
    lam: float = 0.1
    sharing: Sharing = Sharing.PER_FEATURE
    lambda_in_loss: bool = True

    def __post_init__(self) -> None:
        lengths = {v.shape for v in (self.mu, self.sigma_param, self.gamma, self.beta)}
        if len(lengths) != 1 or self.mu.ndim != 1:
            raise DimensionError(f"Norm layer '{self.name}' vectors must be 1-d with equal length.")
        if self.lam < 0:
            raise ConfigError(f"Norm layer '{self.name}': lambda must be non-negative, got {self.lam}.")

    @classmethod
    def default(
        cls,
        name: str,
        units: int,
        mode: SigmaMode = SigmaMode.LOG,
        lam: float = 0.1,
        sharing: Sharing = Sharing.PER_FEATURE,
        lambda_in_loss: bool = True,
    ) -> "NormLayerState":
        """mu = 0, sigma = 1, gamma = 1, beta = 0."""
        return cls(
            name=name,
            mu=np.zeros(units),
            sigma_param=param_from_sigma(np.ones(units), mode),
            gamma=np.ones(units),
            beta=np.zeros(units),
            mode=mode,
            lam=lam,
            sharing=sharing,
            lambda_in_loss=lambda_in_loss,
        )

    @property
    def units(self) -> int:
        return self.mu.shape[0]

    @property
    def loss_weight(self) -> float:
        """Multiplier of the NLL term; 1 when lambda is applied as a learning-rate multiplier instead."""
        return self.lam if self.lambda_in_loss else 1.0

    def sigma(self) -> np.ndarray:
        return sigma_from_param(self.sigma_param, self.mode)

    def param_names(self) -> dict[str, str]:
        return {key: f"{self.name}.{key}" for key in ("mu", "sigma", "gamma", "beta")}

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            f"{self.name}.mu": self.mu,
            f"{self.name}.sigma": self.sigma_param,
            f"{self.name}.gamma": self.gamma,
            f"{self.name}.beta": self.beta,
        }

    def check_sigma_floor(self) -> None:
        sigma = self.sigma()
        small = np.flatnonzero(np.abs(sigma) < SIGMA_FLOOR)
        if small.size:
            raise DegenerateSigmaError(
                f"Norm layer '{self.name}' unit {int(small[0])}: |sigma| = {abs(sigma[small[0]]):.3g} "
                f"is below {SIGMA_FLOOR:g}."
            )


@dataclass
class BatchNormState:
    """Moving and population statistics plus gamma, beta of a batch (re)normalization layer."""

    name: str
    moving_mu: np.ndarray
    moving_var: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.99
    population_mu: Optional[np.ndarray] = None
    population_var: Optional[np.ndarray] = None
    sharing: Sharing = Sharing.PER_FEATURE
    renorm: bool = False
    r_max: float = 3.0
    d_max: float = 5.0

    def __post_init__(self) -> None:
        if self.epsilon <= 0:
            raise ConfigError(f"Batch norm layer '{self.name}': epsilon must be positive.")
        if not 0.0 < self.momentum < 1.0:
            raise ConfigError(f"Batch norm layer '{self.name}': momentum must lie in (0, 1).")
        if np.any(self.moving_var < 0):
            raise ConfigError(f"Batch norm layer '{self.name}': moving variance must be non-negative.")

    @classmethod
    def default(
        cls,
        name: str,
        units: int,
        sharing: Sharing = Sharing.PER_FEATURE,
        renorm: bool = False,
        **kwargs,
    ) -> "BatchNormState":
        return cls(
            name=name,
            moving_mu=np.zeros(units),
            moving_var=np.ones(units),
            gamma=np.ones(units),
            beta=np.zeros(units),
            sharing=sharing,
            renorm=renorm,
            **kwargs,
        )

    @property
    def units(self) -> int:
        return self.gamma.shape[0]

    @property
    def finalized(self) -> bool:
        return self.population_mu is not None and self.population_var is not None

    def eval_stats(self) -> tuple[np.ndarray, np.ndarray]:
        if self.finalized:
            return self.population_mu, self.population_var
        return self.moving_mu, self.moving_var

    def arrays(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.gamma": self.gamma, f"{self.name}.beta": self.beta}


class BatchlessResult(NamedTuple):
    a_out: Tensor
    nll_loss: Tensor
    gauged_metric: float


def unit_layout(a_in: ArrayOrTensor, sharing: Sharing, units: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Reduction axes and broadcast shape of per-unit vectors for an input and sharing rule."""
    shape = a_in.shape
    if sharing is Sharing.PER_FEATURE:
        if len(shape) != 2 or shape[1] != units:
            raise DimensionError(f"Per-feature normalization expects N x {units}, got {shape}.")
        return (0,), (1, units)
    if len(shape) != 4 or shape[1] != units:
        raise DimensionError(f"Per-channel normalization expects N x {units} x H x W, got {shape}.")
    return (0, 2, 3), (1, units, 1, 1)


def gauged_losses(a_in: ArrayOrTensor, state: NormLayerState) -> np.ndarray:
    """Per-activation gauged loss: the NLL minus its own expectation under N(mu, sigma^2)."""
    data = a_in.data if isinstance(a_in, Tensor) else np.asarray(a_in, dtype=np.float64)
    _, view = unit_layout(data, state.sharing, state.units)
    z = (data - state.mu.reshape(view)) / state.sigma().reshape(view)
    # log|sigma| - sg log|sigma| vanishes in value.
    return state.lam * (0.5 * z * z - 0.5)


def exact_nll(a_in: ArrayOrTensor, state: NormLayerState) -> float:
    """Mean Gaussian NLL of the activations, including the 1/2 log(2 pi) constant and lambda."""
    data = a_in.data if isinstance(a_in, Tensor) else np.asarray(a_in, dtype=np.float64)
    _, view = unit_layout(data, state.sharing, state.units)
    sigma = state.sigma().reshape(view)
    z = (data - state.mu.reshape(view)) / sigma
    per_activation = 0.5 * z * z + np.log(np.abs(sigma)) + HALF_LOG_2PI
    return float(state.lam * per_activation.mean())


def batchless_forward(a_in: ArrayOrTensor, state: NormLayerState) -> BatchlessResult:
    """Normalize with the learned statistics and return the layer's NLL loss and gauged metric.

    a_out = (a_in - sg mu) / sg sigma * gamma + beta, and the NLL sees only sg a_in,
    so the loss term trains mu and sigma while a_out trains gamma, beta and upstream weights.
    The output never depends on other instances of the batch, so any batch size works,
    including one.

    Args:
        a_in: Layer input, N x units or N x C x H x W for per-channel sharing.
        state: Learned statistics and affine parameters of the layer.

    Returns:
        BatchlessResult with the normalized output, the NLL term already scaled by the
        layer's loss weight, and the mean squared gauged loss of this batch.

    Raises:
        DimensionError: If the input does not match the layer's units.
        DegenerateSigmaError: If some |sigma| fell below the floor.
    """
    a_in = as_tensor(a_in)
    _, view = unit_layout(a_in, state.sharing, state.units)
    state.check_sigma_floor()

    names = state.param_names()
    mu = ops.reshape(parameter(state.mu, names["mu"]), view)
    sigma = ops.reshape(sigma_from_param(parameter(state.sigma_param, names["sigma"]), state.mode), view)
    gamma = ops.reshape(parameter(state.gamma, names["gamma"]), view)
    beta = ops.reshape(parameter(state.beta, names["beta"]), view)

    normalized = ops.div(ops.sub(a_in, stop_gradient(mu)), stop_gradient(sigma))
    a_out = ops.add(ops.mul(normalized, gamma), beta)

    z = ops.div(ops.sub(stop_gradient(a_in), mu), sigma)
    per_activation = ops.add(ops.scale(ops.square(z), 0.5), ops.log(ops.absolute(sigma)))
    nll_loss = ops.scale(ops.mean_all(per_activation), state.loss_weight)

    gauged = gauged_losses(a_in, state)
    return BatchlessResult(a_out, nll_loss, float(np.mean(gauged * gauged)))


def _check_batch(a_in: Tensor, axes: tuple[int, ...], name: str) -> None:
    count = int(np.prod([a_in.shape[a] for a in axes]))
    if count <= 1:
        raise InsufficientBatchError(
            f"Layer '{name}' needs more than one value per unit for batch statistics, got {count}."
        )


def _batch_standardize(a_in: Tensor, axes: tuple[int, ...], epsilon: float):
    batch_mu = ops.reduce(a_in, "mean", axes, keepdims=True)
    centered = ops.sub(a_in, batch_mu)
    batch_var = ops.reduce(ops.square(centered), "mean", axes, keepdims=True)
    x_hat = ops.div(centered, ops.sqrt(ops.add(batch_var, epsilon)))
    return x_hat, batch_mu.data.reshape(-1), batch_var.data.reshape(-1)


def _eval_standardize(a_in: Tensor, state: BatchNormState, view: tuple[int, ...]) -> Tensor:
    mu, var = state.eval_stats()
    return ops.div(ops.sub(a_in, mu.reshape(view)), np.sqrt(var + state.epsilon).reshape(view))


def _update_moving(state: BatchNormState, batch_mu: np.ndarray, batch_var: np.ndarray) -> None:
    state.moving_mu[...] = state.momentum * state.moving_mu + (1.0 - state.momentum) * batch_mu
    state.moving_var[...] = state.momentum * state.moving_var + (1.0 - state.momentum) * batch_var


def _affine(x_hat: Tensor, state: BatchNormState, view: tuple[int, ...]) -> Tensor:
    gamma = ops.reshape(parameter(state.gamma, f"{state.name}.gamma"), view)
    beta = ops.reshape(parameter(state.beta, f"{state.name}.beta"), view)
    return ops.add(ops.mul(x_hat, gamma), beta)


def batchnorm_forward(a_in: ArrayOrTensor, state: BatchNormState, phase: Union[Phase, str]) -> Tensor:
    """Batch normalization: batch statistics in training (moving averages updated), stored ones in eval.

    Args:
        a_in: Layer input.
        state: Moving statistics and affine parameters; updated in place when training.
        phase: TRAIN standardizes with the batch, EVAL with the moving averages.

    Returns:
        The normalized and affinely transformed tensor.

    Raises:
        InsufficientBatchError: In training, when a unit sees a single value.
    """
    a_in = as_tensor(a_in)
    axes, view = unit_layout(a_in, state.sharing, state.units)
    if Phase(phase) is Phase.EVAL:
        return _affine(_eval_standardize(a_in, state, view), state, view)

    _check_batch(a_in, axes, state.name)
    x_hat, batch_mu, batch_var = _batch_standardize(a_in, axes, state.epsilon)
    _update_moving(state, batch_mu, batch_var)
    return _affine(x_hat, state, view)


def renorm_correction(
    state: BatchNormState, batch_mu: np.ndarray, batch_var: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Clipped r and d relating batch statistics to the moving ones."""
    batch_sigma = np.sqrt(batch_var + state.epsilon)
    moving_sigma = np.sqrt(state.moving_var + state.epsilon)
    r = np.clip(batch_sigma / moving_sigma, 1.0 / state.r_max, state.r_max)
    d = np.clip((batch_mu - state.moving_mu) / moving_sigma, -state.d_max, state.d_max)
    return r, d


def batchrenorm_forward(a_in: ArrayOrTensor, state: BatchNormState, phase: Union[Phase, str]) -> Tensor:
    """Batch renormalization: batch-standardized values corrected by constant r and d.

    r and d come from renorm_correction and are constants to the tape. Eval behaves exactly
    like batchnorm_forward.
    """
    a_in = as_tensor(a_in)
    axes, view = unit_layout(a_in, state.sharing, state.units)
    if Phase(phase) is Phase.EVAL:
        return _affine(_eval_standardize(a_in, state, view), state, view)

    _check_batch(a_in, axes, state.name)
    x_hat, batch_mu, batch_var = _batch_standardize(a_in, axes, state.epsilon)
    r, d = renorm_correction(state, batch_mu, batch_var)
    x_hat = ops.add(ops.mul(x_hat, r.reshape(view)), d.reshape(view))
    _update_moving(state, batch_mu, batch_var)
    return _affine(x_hat, state, view)
