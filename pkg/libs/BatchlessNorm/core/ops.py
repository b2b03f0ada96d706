"""Differentiable operations on ``Tensor``.

Every op computes its forward value with numpy and, when any input is recorded,
records a node with a vector-Jacobian product closure on the inputs' tape.
"""

from __future__ import annotations

from typing import Iterable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from BatchlessNorm.core.tape import VJP, Tensor
from BatchlessNorm.utils.errors import (
    ContractError,
    DimensionError,
    DomainError,
    LabelIndexError,
    NonFiniteError,
)

Operand = Union[Tensor, np.ndarray, float, int]

ELEMENTWISE_KINDS = (
    "isrlu",
    "leaky_relu",
    "exp",
    "log",
    "abs",
    "square",
    "sqrt",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
)


def as_tensor(value: Operand) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], vjp: VJP) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"Op '{op}' produced non-finite values.")
    tape = None
    for tensor in inputs:
        if tensor.tape is None:
            continue
        if tape is None:
            tape = tensor.tape
        elif tensor.tape is not tape:
            raise ContractError(f"Op '{op}' mixes tensors from different tapes.")
    if tape is None:
        return Tensor(data)
    return tape.record(op, data, tuple(t.node_id for t in inputs), vjp)


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over broadcast axes so it matches ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def stop_gradient(x: Operand) -> Tensor:
    """Identity forward; the backward pass sends exact zeros to ``x``."""
    x = as_tensor(x)
    if x.is_constant:
        return x
    return _emit("stop_gradient", x.data, (x,), lambda g: (np.zeros_like(x.data),))


# Binary arithmetic ---------------------------------------------------------


def add(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _emit("add", out, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _emit("sub", out, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _emit(
        "mul",
        out,
        (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
    )


def div(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.data == 0.0):
        raise DomainError("Division by zero.")
    out = a.data / b.data

    def vjp(g):
        return (unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape))

    return _emit("div", out, (a, b), vjp)


def neg(x: Operand) -> Tensor:
    x = as_tensor(x)
    return _emit("neg", -x.data, (x,), lambda g: (-g,))


def scale(x: Operand, factor: float) -> Tensor:
    x = as_tensor(x)
    factor = float(factor)
    return _emit("scale", x.data * factor, (x,), lambda g: (g * factor,))


# Unary functions -----------------------------------------------------------


def exp(x: Operand) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _emit("exp", out, (x,), lambda g: (g * out,))


def log(x: Operand) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0.0):
        raise DomainError("Log of a non-positive value.")
    return _emit("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def absolute(x: Operand) -> Tensor:
    x = as_tensor(x)
    return _emit("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def square(x: Operand) -> Tensor:
    x = as_tensor(x)
    return _emit("square", x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def sqrt(x: Operand) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data < 0.0):
        raise DomainError("Square root of a negative value.")
    out = np.sqrt(x.data)
    return _emit("sqrt", out, (x,), lambda g: (0.5 * g / out,))


def isrlu(x: Operand, alpha: float = 4.0) -> Tensor:
    """Inverse square root linear unit: x for x >= 0, x / sqrt(1 + alpha x^2) below."""
    x = as_tensor(x)
    negative = x.data < 0.0
    root = np.sqrt(1.0 + alpha * np.square(np.where(negative, x.data, 0.0)))
    out = np.where(negative, x.data / root, x.data)
    slope = np.where(negative, root ** -3, 1.0)
    return _emit("isrlu", out, (x,), lambda g: (g * slope,))


def leaky_relu(x: Operand, slope: float = 0.3) -> Tensor:
    x = as_tensor(x)
    factor = np.where(x.data >= 0.0, 1.0, slope)
    return _emit("leaky_relu", x.data * factor, (x,), lambda g: (g * factor,))


def elementwise(x: Operand, kind: str, other: Optional[Operand] = None, **params) -> Tensor:
    """Apply a pointwise function by name; binary kinds take ``other`` (tensor or scalar)."""
    unary = {
        "exp": exp,
        "log": log,
        "abs": absolute,
        "square": square,
        "sqrt": sqrt,
    }
    binary = {"add": add, "sub": sub, "mul": mul, "div": div}
    if kind in unary:
        return unary[kind](x)
    if kind in binary:
        if other is None:
            raise ContractError(f"Elementwise '{kind}' needs a second operand.")
        return binary[kind](x, other)
    if kind == "isrlu":
        return isrlu(x, params.get("alpha", 4.0))
    if kind == "leaky_relu":
        return leaky_relu(x, params.get("slope", 0.3))
    if kind == "scale":
        return scale(x, params["factor"] if "factor" in params else other)
    raise ContractError(f"Unknown elementwise kind '{kind}'. Expected one of {ELEMENTWISE_KINDS}.")


# Shape and reductions ------------------------------------------------------


def _normalize_axes(axes: Optional[Iterable[int]], ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    normalized = []
    for axis in axes:
        if not -ndim <= axis < ndim:
            raise DimensionError(f"Axis {axis} is out of range for {ndim} dimensions.")
        normalized.append(axis % ndim)
    return tuple(sorted(set(normalized)))


def reduce(x: Operand, kind: str = "sum", axes: Optional[Iterable[int]] = None, keepdims: bool = False) -> Tensor:
    """Sum or mean over ``axes`` (all axes when None); an empty axis-set is the identity."""
    x = as_tensor(x)
    if kind not in ("sum", "mean"):
        raise ContractError(f"Unknown reduction '{kind}'.")
    axes = _normalize_axes(axes, x.ndim)
    if not axes:
        return x
    count = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.sum(axis=axes, keepdims=keepdims)
    if kind == "mean":
        out = out / count

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        g = np.broadcast_to(g, x.shape)
        return ((g / count) if kind == "mean" else g.copy(),)

    return _emit(f"reduce_{kind}", np.asarray(out, dtype=np.float64), (x,), vjp)


def sum_all(x: Operand) -> Tensor:
    return reduce(x, "sum")


def mean_all(x: Operand) -> Tensor:
    return reduce(x, "mean")


def reshape(x: Operand, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"Cannot reshape {x.shape} to {tuple(shape)}.") from exc
    return _emit("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


# Linear algebra and spatial ops --------------------------------------------


def matmul(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not compose.")
    out = a.data @ b.data
    return _emit("matmul", out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def conv2d(x: Operand, kernel: Operand) -> Tensor:
    """Same-padded cross-correlation of N x C x H x W input with an O x C x kh x kw kernel.

    The bias is added by the caller.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}.")
    n, c, h, w = x.shape
    o, kc, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(f"conv2d channel mismatch: input has {c}, kernel expects {kc}.")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d needs odd kernel sizes for same padding, got {kh}x{kw}.")

    ph, pw = kh // 2, kw // 2
    padded = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))  # n, c, h, w, kh, kw
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * kh * kw)
    weights = kernel.data.reshape(o, c * kh * kw)
    out = (cols @ weights.T).reshape(n, h, w, o).transpose(0, 3, 1, 2)

    def vjp(g):
        g_cols = g.transpose(0, 2, 3, 1).reshape(n * h * w, o)
        d_kernel = (g_cols.T @ cols).reshape(kernel.shape)
        d_cols = (g_cols @ weights).reshape(n, h, w, c, kh, kw)
        d_padded = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                d_padded[:, :, i : i + h, j : j + w] += d_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return d_padded[:, :, ph : ph + h, pw : pw + w], d_kernel

    return _emit("conv2d", np.ascontiguousarray(out), (x, kernel), vjp)


def maxpool2d(x: Operand) -> Tensor:
    """2x2 max-pooling; odd trailing rows/columns are dropped; ties route to the first maximum."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects a 4-d input, got {x.shape}.")
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise DimensionError(f"maxpool2d needs at least 2x2 spatial size, got {h}x{w}.")
    cropped = x.data[:, :, : 2 * h2, : 2 * w2]
    blocks = cropped.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    winner = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, winner[..., None], axis=-1)[..., 0]

    def vjp(g):
        routed = np.zeros_like(blocks)
        np.put_along_axis(routed, winner[..., None], g[..., None], axis=-1)
        routed = routed.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
        grad = np.zeros_like(x.data)
        grad[:, :, : 2 * h2, : 2 * w2] = routed
        return (grad,)

    return _emit("maxpool2d", out, (x,), vjp)


# Output layer --------------------------------------------------------------


def _check_labels(labels: np.ndarray, n: int, classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError(f"Expected {n} labels, got shape {labels.shape}.")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise LabelIndexError(f"Labels must lie in [0, {classes}).")
    return labels.astype(np.int64)


def softmax(logits: Operand) -> Tensor:
    logits = as_tensor(logits)
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (probs * (g - (g * probs).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", probs, (logits,), vjp)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Operand, labels: np.ndarray) -> Tensor:
    """Mean negative log-softmax probability of the labelled class."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"Logits must be N x C, got {logits.shape}.")
    n, classes = logits.shape
    labels = _check_labels(labels, n, classes)
    log_probs = log_softmax(logits.data)
    rows = np.arange(n)
    loss = -log_probs[rows, labels].mean()

    def vjp(g):
        grad = np.exp(log_probs)
        grad[rows, labels] -= 1.0
        return (grad * (g / n),)

    return _emit("softmax_cross_entropy", np.asarray(loss), (logits,), vjp)


def _install_operators() -> None:
    Tensor.__add__ = add
    Tensor.__radd__ = lambda self, other: add(other, self)
    Tensor.__sub__ = sub
    Tensor.__rsub__ = lambda self, other: sub(other, self)
    Tensor.__mul__ = mul
    Tensor.__rmul__ = lambda self, other: mul(other, self)
    Tensor.__truediv__ = div
    Tensor.__rtruediv__ = lambda self, other: div(other, self)
    Tensor.__neg__ = neg
    Tensor.__matmul__ = matmul


_install_operators()
