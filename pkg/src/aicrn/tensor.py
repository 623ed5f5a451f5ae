"""Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable operation wraps its numpy result in a new :class:`Tensor`
and attaches a node holding the inputs and a backward rule.  Nodes carry a
monotonically increasing sequence number, so sorting the nodes reachable from a
loss by that number recovers the order in which they were recorded; ``backward``
walks that order in reverse and visits each node exactly once.

Compute precision follows the input arrays: models are built in float32 for
training, while the gradient checks build everything in float64.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError

MAX_RANK = 3

_sequence = itertools.count()
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Run operations without recording them (inference)."""
    previous = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


@contextmanager
def branch_trace():
    """Collect the branch taken by every nonsmooth op (ReLU sign masks, argmax indices).

    Two evaluations with equal traces lie on the same smooth piece of the function.
    """
    previous = getattr(_state, "branches", None)
    trace: list[bytes] = []
    _state.branches = trace
    try:
        yield trace
    finally:
        _state.branches = previous


def note_branch(pattern: np.ndarray) -> None:
    trace = getattr(_state, "branches", None)
    if trace is not None:
        trace.append(pattern.tobytes())


@dataclass(eq=False)
class Node:
    seq: int
    name: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype.kind != "f":
                arr = arr.astype(np.float32)
        else:
            arr = np.asarray(data, dtype=dtype)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"tensor rank {arr.ndim} exceeds {MAX_RANK}: shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, _wrap(other, self))

    def __radd__(self, other):
        return add(_wrap(other, self), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self))

    def __rmul__(self, other):
        return mul(_wrap(other, self), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return reduce(self, axis, "sum")

    def mean(self, axis=None):
        return reduce(self, axis, "mean")

    def max(self, axis=None):
        return reduce(self, axis, "max")

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def record(
    name: str,
    data: np.ndarray,
    inputs: Sequence[Tensor],
    backward_rule: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap ``data`` as the output of an op, recording it when any input needs gradients.

    ``backward_rule`` maps the output gradient to one gradient per input
    (``None`` for inputs that need none).
    """
    out = Tensor(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(next(_sequence), name, tuple(inputs), backward_rule)
    return out


@dataclass
class Tape:
    """Operations reachable from one output, in recorded order."""

    nodes: list[Node]

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen: set[int] = set()
        nodes: list[Node] = []
        stack = [out]
        while stack:
            t = stack.pop()
            node = t.node
            if node is None or id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node.inputs)
        nodes.sort(key=lambda n: n.seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def names(self) -> list[str]:
        return [n.name for n in self.nodes]


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

    Repeated calls add to existing leaf gradients; call ``zero_grad`` between steps.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape.from_output(loss)
    if not tape.nodes:
        raise ValueError("backward called on a tensor with no recorded operations")

    # Each node has exactly one output, so intermediate gradients are keyed by node.
    grads: dict[int, np.ndarray] = {id(loss.node): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise ShapeError(f"{node.name}: backward produced {gi.shape} for input {t.shape}")
            if t.node is None:
                t.grad = gi.astype(t.dtype, copy=True) if t.grad is None else t.grad + gi
            else:
                key = id(t.node)
                grads[key] = grads[key] + gi if key in grads else gi


# ---------------------------------------------------------------------------
# broadcasting


def broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    try:
        shape = np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a} and {b}") from None
    if len(shape) > MAX_RANK:
        raise ShapeError(f"broadcast of {a} and {b} exceeds rank {MAX_RANK}")
    return shape


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` over the axes that broadcasting stretched to reach its shape."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    if kind == "add":
        return add(a, b)
    if kind == "sub":
        return sub(a, b)
    if kind == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def add(a: Tensor, b: Tensor) -> Tensor:
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return record("add", a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return record("sub", a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def rule(g):
        return (
            unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return record("mul", ad * bd, (a, b), rule)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return record("scale", a.data * c, (a,), lambda g: (g * c,))


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a: Tensor, w: Tensor) -> Tensor:
    if a.ndim != 2 or w.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {w.shape}")
    if a.shape[1] != w.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {w.shape}")
    ad, wd = a.data, w.data

    def rule(g):
        return (
            g @ wd.T if a.requires_grad else None,
            ad.T @ g if w.requires_grad else None,
        )

    return record("matmul", ad @ wd, (a, w), rule)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from None
    src = a.shape
    return record("reshape", out, (a,), lambda g: (g.reshape(src),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(tensors)
    axis = _check_axis(axis, tensors[0].ndim)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return record("concat", out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


# ---------------------------------------------------------------------------
# reductions


def _check_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise IndexError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def reduce(a: Tensor, axis: int | None, kind: str) -> Tensor:
    """Reduce along ``axis`` keeping it as extent 1; ``axis=None`` reduces to a scalar.

    ``max`` routes the gradient to the first maximal element.
    """
    x = a.data
    if axis is None:
        flat = reshape(a, (x.size,)) if x.ndim != 1 else a
        out = reduce(flat, 0, kind)
        return reshape(out, ())
    axis = _check_axis(axis, x.ndim)
    n = x.shape[axis]
    if kind == "sum":
        return record("sum", x.sum(axis=axis, keepdims=True), (a,), lambda g: (np.broadcast_to(g, x.shape).copy(),))
    if kind == "mean":
        inv = x.dtype.type(1.0 / n)
        return record(
            "mean", x.mean(axis=axis, keepdims=True), (a,), lambda g: (np.broadcast_to(g * inv, x.shape).copy(),)
        )
    if kind == "max":
        idx = np.expand_dims(np.argmax(x, axis=axis), axis)
        note_branch(idx)
        out = np.take_along_axis(x, idx, axis=axis)

        def rule(g):
            gx = np.zeros_like(x)
            np.put_along_axis(gx, idx, g, axis=axis)
            return (gx,)

        return record("max", out, (a,), rule)
    raise ValueError(f"unknown reduction {kind!r}")
