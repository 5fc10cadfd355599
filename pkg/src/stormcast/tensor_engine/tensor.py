"""Dense tensors plus a recording tape for reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Operations (see ``ops``) compute
eagerly; while a :class:`Tape` is active, every operation that touches a
gradient-requiring tensor appends a :class:`Node` holding its inputs and a
backward rule. Nodes are appended in execution order, so the tape is already
topologically sorted and :func:`backward` can walk it once in reverse.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from ..errors import ContractError, NumericalError

_DEFAULT_DTYPE = np.float64
_FINITE_CHECKS = True
_tid_counter = itertools.count()
_TAPE_STACK: list["Tape"] = []


def set_default_dtype(dtype) -> None:
    """Select the project-wide float precision (np.float32 or np.float64)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def using_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the default precision."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def set_finite_checks(enabled: bool) -> None:
    """Toggle the NaN/Inf guard run after every forward operation."""
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


def check_finite(data: np.ndarray, op_name: str) -> None:
    if _FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite values produced by '{op_name}'")


class Tensor:
    """A dense, row-major float array with an identity usable as a gradient key.

    ``requires_grad`` marks leaves (parameters) whose gradients are wanted;
    it is also set on op outputs recorded on an active tape so the backward
    pass knows which paths to follow.
    """

    __slots__ = ("data", "requires_grad", "tid")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.tid = next(_tid_counter)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A gradient-free view of the same values (no tape node is recorded)."""
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad, dtype=self.data.dtype)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{grad})"

    # Arithmetic sugar; the actual rules live in ops.py (imported lazily to
    # avoid a module cycle).
    def __add__(self, other):
        from . import ops

        return ops.add(self, _coerce(other, self))

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, _coerce(other, self))

    def __mul__(self, other):
        from . import ops

        if isinstance(other, (int, float)):
            return ops.scale(self, float(other))
        return ops.mul(self, _coerce(other, self))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)


def _coerce(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value), dtype=like.data.dtype)


class Node:
    """One recorded operation: inputs, output identifier, backward rule.

    ``backward_fn`` maps the gradient at the output to a tuple of gradients
    aligned with ``inputs`` (``None`` for inputs that need no gradient).
    """

    __slots__ = ("inputs", "out_tid", "backward_fn")

    def __init__(self, inputs: tuple, out_tid: int, backward_fn: Callable):
        self.inputs = inputs
        self.out_tid = out_tid
        self.backward_fn = backward_fn


class Tape:
    """Append-only record of operations, in execution (hence topological) order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tapes must be exited in LIFO order"

    def __len__(self) -> int:
        return len(self.nodes)


def current_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record(out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Attach a node for ``out`` to the active tape, if any input wants gradients."""
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(Node(tuple(inputs), out.tid, backward_fn))
    return out


class GradientTable:
    """Gradients keyed by tensor identifier; unreached tensors read as zero."""

    def __init__(self, grads: dict):
        self._grads = grads

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        grad = self._grads.get(tensor.tid)
        if grad is None:
            return np.zeros_like(tensor.data)
        return grad

    def get(self, tensor: Tensor) -> np.ndarray:
        return self[tensor]

    def __contains__(self, tensor: Tensor) -> bool:
        return tensor.tid in self._grads

    def __len__(self) -> int:
        return len(self._grads)


def backward(loss: Tensor, tape: Tape) -> GradientTable:
    """Reverse-sweep the tape from a scalar loss.

    Each node is visited exactly once; the output gradient is popped when its
    producing node is reached, so memory for intermediates is released as the
    sweep proceeds. Parameters never produced by a node keep their entries.
    """
    if loss.data.size != 1:
        raise ContractError("backward() requires a scalar loss tensor")
    grads: dict[int, np.ndarray] = {loss.tid: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        grad_out = grads.pop(node.out_tid, None)
        if grad_out is None:
            continue  # node does not influence the loss
        input_grads = node.backward_fn(grad_out)
        for tensor, grad in zip(node.inputs, input_grads):
            if grad is None or not tensor.requires_grad:
                continue
            held = grads.get(tensor.tid)
            grads[tensor.tid] = grad if held is None else held + grad
    return GradientTable(grads)
