"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from BatchlessNorm.core.tape import Tape, Tensor


def numerical_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        upper = f(x)
        flat[i] = original - h
        lower = f(x)
        flat[i] = original
        out[i] = (upper - lower) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-abs difference scaled by the larger max-abs magnitude of the two."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), 1e-8)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale)


def gradient_check(
    fn: Callable[..., Tensor],
    arrays: Sequence[np.ndarray],
    h: float = 1e-5,
) -> list[float]:
    """Compare tape gradients of ``fn(*tensors)`` with central differences.

    ``fn`` must return a scalar tensor. Returns one relative error per input.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    with Tape() as tape:
        tensors = [tape.parameter(a, f"input{i}") for i, a in enumerate(arrays)]
        loss = fn(*tensors)
    grads = tape.backward(loss)

    errors = []
    for i, tensor in enumerate(tensors):

        def scalar(x, i=i):
            inputs = [Tensor(a) for a in arrays]
            inputs[i] = Tensor(x)
            return fn(*inputs).item()

        numeric = numerical_gradient(scalar, arrays[i], h)
        errors.append(relative_error(grads[tensor.node_id], numeric))
    return errors
