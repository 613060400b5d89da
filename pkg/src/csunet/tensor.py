"""Dense tensor type and the reverse-mode tape.

Every op output remembers the node that produced it.  Nodes carry a global
creation sequence number, so sorting the nodes reachable from a loss by that
number yields a valid topological order: that sorted list is the tape swept
by :func:`backward`.
"""

from __future__ import annotations

import contextlib
import itertools
import os
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_seq = itertools.count()
_grad_enabled = True
_debug_nan = bool(os.environ.get("CSUNET_DEBUG_NAN"))


class ShapeError(ValueError):
    """Operand extents are incompatible with the requested op."""


class ConfigError(ValueError):
    """An op or model was configured with inconsistent hyperparameters."""


class UsageError(RuntimeError):
    """API misuse, e.g. calling backward on a non-scalar."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording inside the block (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def debug_nan(enabled: bool = True) -> Iterator[None]:
    """Raise FloatingPointError as soon as an op produces a non-finite value."""
    global _debug_nan
    prev = _debug_nan
    _debug_nan = enabled
    try:
        yield
    finally:
        _debug_nan = prev


@dataclass(eq=False)
class Node:
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    name: str
    seq: int = field(default_factory=lambda: next(_seq))


class Tensor:
    """N-dimensional array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def astype(self, dtype) -> "Tensor":
        """Detached copy in another precision (keeps requires_grad)."""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def detach(self) -> "Tensor":
        return Tensor(self.data, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar (implemented in ops) -------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.scalar_mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from . import ops
        return ops.slice(self, idx)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def permute(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.permute(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def make_result(
    data: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    name: str,
) -> Tensor:
    """Wrap an op output and, when gradients are needed, record its node."""
    if _debug_nan and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{name} produced non-finite values")
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(tuple(inputs), backward_fn, name)
    return out


class Tape:
    """Ordered op nodes leading to a given output, oldest first."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def collect(cls, root: Tensor) -> "Tape":
        seen: set[int] = set()
        nodes: list[Node] = []
        stack = [root]
        while stack:
            t = stack.pop()
            n = t.node
            if n is None or id(n) in seen:
                continue
            seen.add(id(n))
            nodes.append(n)
            stack.extend(n.inputs)
        nodes.sort(key=lambda n: n.seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; call ``zero_grad`` to reset.
    """
    if grad is None:
        if loss.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor with requires_grad=True")

    tape = Tape.collect(loss)
    # keyed by id(); the tape keeps every tensor alive for the sweep
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    leaves: dict[int, Tensor] = {}
    if loss.node is None:
        leaves[id(loss)] = loss
    for n in tape.nodes:
        for t in n.inputs:
            if t.requires_grad and t.node is None:
                leaves[id(t)] = t
    _sweep(tape, loss, grads)
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        if t.grad is None:
            t.grad = np.array(g, dtype=t.dtype, copy=True)
        else:
            t.grad = t.grad + g


def _sweep(tape: Tape, loss: Tensor, grads: dict[int, np.ndarray]) -> None:
    # node -> id of the tensor it produced
    node_out: dict[int, int] = {id(loss.node): id(loss)} if loss.node is not None else {}
    for n in tape.nodes:
        for t in n.inputs:
            if t.node is not None:
                node_out[id(t.node)] = id(t)
    for n in reversed(tape.nodes):
        g = grads.pop(node_out[id(n)], None)
        if g is None:
            continue
        in_grads = n.backward(g)
        for t, gi in zip(n.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
