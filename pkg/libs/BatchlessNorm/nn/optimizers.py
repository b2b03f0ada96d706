"""Adam and AMSGrad updates on a named parameter store, plus L2 decay folded into gradients.

With per-coordinate gradient normalization a constant multiplier on a loss term
mostly cancels once the second moment has warmed up, so lambda applied in the
loss chiefly shapes the early transient. ``lr_multipliers`` is the alternative
that scales the step size of selected parameters directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, MutableMapping, Optional

import numpy as np

from BatchlessNorm.utils.errors import ConfigError, ContractError, DimensionError

OPTIMIZERS = ("adam", "amsgrad")
NORM_PARAM_SUFFIXES = (".mu", ".sigma", ".gamma", ".beta")


@dataclass
class OptimizerState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    amsgrad: bool = False
    lr_multipliers: dict[str, float] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    v_max: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ConfigError(f"Learning rate must be positive, got {self.lr}.")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("Moment decay rates must lie in [0, 1).")

    @property
    def name(self) -> str:
        return "amsgrad" if self.amsgrad else "adam"


def make_optimizer(
    name: str, lr: float, lr_multipliers: Optional[Mapping[str, float]] = None, **kwargs
) -> OptimizerState:
    if name not in OPTIMIZERS:
        raise ConfigError(f"Unknown optimizer '{name}'. Expected one of {OPTIMIZERS}.")
    return OptimizerState(lr=lr, amsgrad=name == "amsgrad", lr_multipliers=dict(lr_multipliers or {}), **kwargs)


def _step(params: MutableMapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: OptimizerState, amsgrad):
    state.t += 1
    correction1 = 1.0 - state.beta1**state.t
    correction2 = 1.0 - state.beta2**state.t
    for name, theta in params.items():
        if name not in grads:
            raise ContractError(f"No gradient for parameter '{name}'.")
        g = grads[name]
        if g.shape != theta.shape:
            raise DimensionError(f"Gradient for '{name}' has shape {g.shape}, parameter has {theta.shape}.")

        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(theta)
            v = np.zeros_like(theta)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name], state.v[name] = m, v

        second = v
        if amsgrad:
            v_max = state.v_max.get(name)
            second = v if v_max is None else np.maximum(v_max, v)
            state.v_max[name] = second

        lr = state.lr * state.lr_multipliers.get(name, 1.0)
        theta[...] = theta - lr * (m / correction1) / (np.sqrt(second / correction2) + state.eps)
    return params


def adam_step(params: MutableMapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: OptimizerState):
    """Bias-corrected Adam; parameters are updated in place and returned."""
    return _step(params, grads, state, amsgrad=False)


def amsgrad_step(params: MutableMapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: OptimizerState):
    """Adam with the running maximum of the second moment in the denominator."""
    return _step(params, grads, state, amsgrad=True)


def optimizer_step(params, grads, state: OptimizerState):
    return amsgrad_step(params, grads, state) if state.amsgrad else adam_step(params, grads, state)


def is_norm_param(name: str) -> bool:
    return name.endswith(NORM_PARAM_SUFFIXES)


def apply_weight_decay(
    grads: Mapping[str, np.ndarray],
    params: Mapping[str, np.ndarray],
    decay: Mapping[str, float],
) -> dict[str, np.ndarray]:
    """Return grads with decay * theta added for every named non-normalization parameter."""
    result = dict(grads)
    for name, strength in decay.items():
        if name not in params:
            raise ConfigError(f"Weight decay names unknown parameter '{name}'.")
        if is_norm_param(name) or strength == 0.0:
            continue
        result[name] = result[name] + strength * params[name]
    return result
