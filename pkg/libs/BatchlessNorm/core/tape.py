"""Recorded computation tape and reverse-mode differentiation.

A ``Tape`` is active inside a ``with`` block on the current thread. Ops whose
inputs are recorded on it append a node; ops on constants only produce
constants. The tape is rebuilt for every forward pass.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from BatchlessNorm.utils.errors import ContractError, NonFiniteError

VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_local = threading.local()


def active_tape() -> Optional["Tape"]:
    """Return the innermost tape entered on this thread, if any."""
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Dense double-precision array, optionally recorded on a tape."""

    __slots__ = ("data", "node_id", "tape")
    __array_priority__ = 100.0

    def __init__(self, data, node_id: Optional[int] = None, tape: Optional["Tape"] = None) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.node_id = node_id
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_constant(self) -> bool:
        return self.node_id is None

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        where = "constant" if self.node_id is None else f"node={self.node_id}"
        return f"Tensor(shape={self.shape}, {where})"


@dataclass
class Node:
    op: str
    inputs: tuple[Optional[int], ...]
    vjp: Optional[VJP]
    shape: tuple[int, ...]
    name: Optional[str] = None


class GradientMap(dict):
    """Gradients keyed by parameter node id; ``names`` maps ids back to parameter names."""

    def __init__(self, names: dict[int, str]) -> None:
        super().__init__()
        self.names = dict(names)

    def by_name(self) -> dict[str, np.ndarray]:
        return {self.names[node_id]: grad for node_id, grad in self.items()}

    def get_by_name(self, name: str) -> np.ndarray:
        for node_id, param_name in self.names.items():
            if param_name == name:
                return self[node_id]
        raise KeyError(name)


@dataclass
class Tape:
    """Ordered record of operation nodes; every node's inputs precede it."""

    nodes: list[Node] = field(default_factory=list)
    _params: dict[str, Tensor] = field(default_factory=dict)

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _local.stack.pop()

    @property
    def parameters(self) -> dict[int, str]:
        return {tensor.node_id: name for name, tensor in self._params.items()}

    def parameter(self, array: np.ndarray, name: str) -> Tensor:
        """Record ``array`` as a named differentiable leaf (one node per name)."""
        if name in self._params:
            return self._params[name]
        data = np.asarray(array, dtype=np.float64)
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(f"Parameter '{name}' holds non-finite values.")
        node_id = len(self.nodes)
        self.nodes.append(Node("parameter", (), None, data.shape, name))
        tensor = Tensor(data, node_id, self)
        self._params[name] = tensor
        return tensor

    def record(self, op: str, data: np.ndarray, inputs: tuple[Optional[int], ...], vjp: VJP) -> Tensor:
        node_id = len(self.nodes)
        self.nodes.append(Node(op, inputs, vjp, data.shape))
        return Tensor(data, node_id, self)

    def backward(self, loss: Tensor) -> GradientMap:
        """Sweep the tape once in reverse and return gradients of ``loss`` for every parameter."""
        if loss.tape is not self or loss.node_id is None:
            raise ContractError("Loss is not recorded on this tape.")
        if loss.ndim != 0:
            raise ContractError(f"Loss must be a scalar, got shape {loss.shape}.")

        grads: dict[int, np.ndarray] = {loss.node_id: np.ones((), dtype=np.float64)}
        result = GradientMap(self.parameters)

        for node_id in range(loss.node_id, -1, -1):
            grad = grads.pop(node_id, None)
            if grad is None:
                continue
            node = self.nodes[node_id]
            if node.op == "parameter":
                if grad.shape != node.shape:
                    raise ContractError(
                        f"Gradient for '{node.name}' has shape {grad.shape}, expected {node.shape}."
                    )
                result[node_id] = grad
                continue
            for input_id, input_grad in zip(node.inputs, node.vjp(grad)):
                if input_id is None or input_grad is None:
                    continue
                if input_id in grads:
                    grads[input_id] = grads[input_id] + input_grad
                else:
                    grads[input_id] = input_grad

        # Unreachable parameters get exact zeros.
        for node_id in result.names:
            if node_id not in result:
                result[node_id] = np.zeros(self.nodes[node_id].shape, dtype=np.float64)
        return result


def backward(loss: Tensor) -> GradientMap:
    """Reverse-mode gradients of a scalar ``loss`` for every parameter on its tape."""
    if loss.tape is None:
        raise ContractError("Loss is a constant; nothing was recorded.")
    return loss.tape.backward(loss)


def parameter(array: np.ndarray, name: str) -> Tensor:
    """Bind ``array`` as a parameter of the active tape, or as a constant when none is active."""
    tape = active_tape()
    if tape is None:
        return Tensor(array)
    return tape.parameter(array, name)


def constant(data) -> Tensor:
    return Tensor(data)
