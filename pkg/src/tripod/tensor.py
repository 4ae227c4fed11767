"""Reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Tensor` wraps an ``np.ndarray``.  Tensors created with
``requires_grad=True`` (leaves) or produced by an operation on at least one
tracked input carry a :class:`Node`; everything else is a plain constant and
never receives gradients.  :func:`backward` orders the recorded nodes into a
tape and replays the backward rules in reverse.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_node_ids = itertools.count()


class NumericalError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class DomainError(ValueError):
    """Raised when an operand is outside an operation's domain."""


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


class Node:
    __slots__ = ("id", "parents", "rule", "op")

    def __init__(self, parents: tuple, rule: Callable | None, op: str):
        self.id = next(_node_ids)
        self.parents = parents
        self.rule = rule
        self.op = op

    @property
    def is_leaf(self) -> bool:
        return self.rule is None


class Tensor:
    """An n-dimensional array with an optional gradient-tape node."""

    __slots__ = ("data", "node", "grad")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.node = Node((), None, "leaf") if requires_grad else None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
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

    @property
    def requires_grad(self) -> bool:
        return self.node is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f", node={self.node.id}" if self.node is not None else ""
        return f"Tensor({self.data!r}{tag})"

    # -- operators ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def var(self, axis=None, ddof=1, keepdims=False):
        return variance(self, axis, ddof, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NumericalError(f"non-finite value produced by {op}")


def _result(data: np.ndarray, parents: Sequence[Tensor], rule: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if any(p.node is not None for p in parents):
        out.node = Node(tuple(parents), rule, op)
    else:
        out.node = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        b = as_tensor(b, like=a)
    else:
        a = as_tensor(a, like=b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc
    return a, b


# -- elementwise binary ----------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), rule, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), rule, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def rule(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.node is not None else None
        gb = _unbroadcast(g * a.data, b.shape) if b.node is not None else None
        return ga, gb

    return _result(a.data * b.data, (a, b), rule, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    if np.any(b.data == 0):
        raise DomainError("division by zero")
    out = a.data / b.data

    def rule(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.node is not None else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.node is not None else None
        return ga, gb

    return _result(out, (a, b), rule, "div")


def maximum(a: Tensor, floor: float) -> Tensor:
    """Elementwise ``max(a, floor)`` against a constant; gradient passes where ``a > floor``."""
    a = as_tensor(a)
    keep = a.data > floor
    return _result(np.where(keep, a.data, floor).astype(a.dtype), (a,), lambda g: (g * keep,), "maximum")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


# -- elementwise unary -----------------------------------------------------
def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    out = _stable_sigmoid(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def softplus(a: Tensor) -> Tensor:
    """``log(1 + exp(a))`` without overflow."""
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return _result(out, (a,), lambda g: (g * _stable_sigmoid(x),), "softplus")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of a nonpositive value")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(a.data)

    def rule(g):
        if np.any(out == 0):
            raise DomainError("sqrt gradient at zero")
        return (g / (2.0 * out),)

    return _result(out, (a,), rule, "sqrt")


def square(a: Tensor) -> Tensor:
    return _result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


# -- linear algebra --------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = (as_tensor(a), as_tensor(b))
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul expects (n,k)@(k,m), got {a.shape}@{b.shape}")

    def rule(g):
        ga = g @ b.data.T if a.node is not None else None
        gb = a.data.T @ g if b.node is not None else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), rule, "matmul")


# -- reductions ------------------------------------------------------------
def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _result(np.asarray(out), (a,), rule, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    return sum_(a, axes, keepdims) * (1.0 / count)


def variance(a: Tensor, axis=None, ddof: int = 1, keepdims: bool = False) -> Tensor:
    """Sample variance; ``ddof=1`` (the default) gives the unbiased estimator."""
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    if count - ddof <= 0:
        raise DomainError(f"variance needs more than {ddof} samples, got {count}")
    centered = a.data - a.data.mean(axis=axes, keepdims=True)
    out = np.asarray((centered * centered).sum(axis=axes, keepdims=keepdims) / (count - ddof))

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (g * centered * (2.0 / (count - ddof)),)

    return _result(out, (a,), rule, "variance")


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    shift = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - shift)
    total = e.sum(axis=axis, keepdims=True)
    out_k = np.log(total) + shift
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)
    soft = e / total

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _result(out, (a,), rule, "logsumexp")


# -- shape manipulation ----------------------------------------------------
def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}") from exc
    return _result(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast")


def reshape(a: Tensor, shape: tuple) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from exc
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)
    return _result(out, (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    basic = _is_basic_index(index)

    def rule(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(np.asarray(out), (a,), rule, "slice")


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tensors, rule, "concat")


def take_along_axis(a: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    out = np.take_along_axis(a.data, indices, axis=axis)

    def rule(g):
        full = np.zeros_like(a.data)
        # repeated indices must accumulate, so scatter with add.at
        idx = list(np.indices(indices.shape, sparse=True))
        idx[axis] = indices
        np.add.at(full, tuple(idx), g)
        return (full,)

    return _result(out, (a,), rule, "gather")


# -- gradient routing ------------------------------------------------------
def stop_gradient(a: Tensor) -> Tensor:
    """Identity forward; contributes no gradient to ``a``."""
    return Tensor(as_tensor(a).data)


def straight_through(continuous: Tensor, quantized_values) -> Tensor:
    """Forward the quantized values, backpropagate to ``continuous`` unchanged."""
    q = np.asarray(quantized_values.data if isinstance(quantized_values, Tensor) else quantized_values)
    if q.shape != continuous.shape:
        raise ShapeError(f"straight_through shapes differ: {continuous.shape} vs {q.shape}")
    return _result(q.astype(continuous.dtype, copy=False), (continuous,), lambda g: (g,), "straight_through")


# -- backward pass ---------------------------------------------------------
def tape_of(loss: Tensor) -> list[Node]:
    """Nodes reachable from ``loss`` in topological order (inputs first)."""
    order: list[Node] = []
    seen: set[int] = set()
    stack = [(loss.node, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for parent in node.parents:
            if parent.node is not None and parent.node.id not in seen:
                stack.append((parent.node, False))
    return order


def backward(loss: Tensor, retain_graph: bool = False) -> dict[int, np.ndarray]:
    """Backpropagate from a scalar ``loss``.

    Returns a map from leaf node id to gradient array; each leaf tensor's
    ``grad`` attribute is also set.  Gradients along multiple paths are summed.
    """
    if loss.node is None:
        raise ValueError("loss is not tracked; nothing to differentiate")
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node.is_leaf:
        loss.grad = np.ones_like(loss.data)
        return {loss.node.id: loss.grad}
    tape = tape_of(loss)
    grads: dict[int, np.ndarray] = {loss.node.id: np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape):
        g = grads.pop(node.id, None) if not node.is_leaf else grads.get(node.id)
        if node.is_leaf or g is None:
            continue
        parent_grads = node.rule(g)
        for parent, pg in zip(node.parents, parent_grads):
            if parent.node is None or pg is None:
                continue
            pid = parent.node.id
            if parent.node.is_leaf:
                leaves[pid] = parent
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = np.asarray(pg, dtype=parent.dtype)
        if not retain_graph:
            node.parents = ()
            node.rule = _consumed
    out = {}
    for pid, leaf in leaves.items():
        leaf.grad = grads[pid]
        out[pid] = grads[pid]
    return out


def _consumed(g):
    raise RuntimeError("graph already consumed by backward(); pass retain_graph=True to reuse it")


def grad(loss: Tensor, wrt: Sequence[Tensor], retain_graph: bool = False) -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. the given leaves (zeros where unreachable)."""
    result = backward(loss, retain_graph=retain_graph)
    return [result.get(t.node.id, np.zeros_like(t.data)) for t in wrt]
