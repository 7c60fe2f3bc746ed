"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Operations are recorded onto a :class:`Graph` tape only while a graph is
active (``with Graph() as g: ...``) and at least one input requires a
gradient. Backward walks the tape in exact reverse recording order.

There is no implicit broadcasting: binary ops accept equal shapes or a
Python scalar on one side. Use :func:`expand` to broadcast explicitly.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Graph", "DimensionError", "ContractError",
    "tensor", "parameter", "backward",
    "matmul", "add", "sub", "mul", "div", "neg", "scale",
    "relu", "sigmoid", "exp", "log", "softplus", "tanh", "absolute", "sqrt", "square",
    "sum", "mean", "max_pool", "concat", "take", "softmax", "layer_norm",
    "reshape", "transpose", "expand", "norm", "l2_normalize", "unfold3x3", "detach",
]


class DimensionError(ValueError):
    """Shapes of operands are incompatible."""


class ContractError(RuntimeError):
    """A precondition of an autodiff routine was violated."""


_state = threading.local()


def _active_graph() -> "Graph | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array with an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "_graph")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._graph = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Graph:
    """Recording tape. Use as a context manager to enable recording."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Graph":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        backward(loss)


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out._graph = None
    graph = _active_graph()
    needs = graph is not None and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        out._graph = graph
        graph.nodes.append(_Node(out, tuple(inputs), backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dT into ``T.grad`` for every tensor reachable from ``loss``.

    The tape is released afterwards (one backward pass per graph), which
    breaks the node/tensor reference cycle so large buffers are freed promptly.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = loss._graph
    if graph is None:
        raise ContractError("loss was not produced under a recording graph")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    reached: dict[int, Tensor] = {id(loss): loss}
    nodes, graph.nodes = graph.nodes, []
    for node in reversed(nodes):
        g = grads.pop(id(node.out), None)
        node.out._graph = None
        if g is None:
            continue
        out = node.out
        # intermediate gradients may share storage with each other; nothing below writes into them
        out.grad = g if out.grad is None else out.grad + g
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                reached[key] = t
    # whatever is left belongs to leaves
    for key, g in grads.items():
        t = reached[key]
        if t.grad is None:
            t.grad = np.array(g, dtype=np.float64)
        else:
            t.grad += g


# ---------------------------------------------------------------- helpers

def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _axis(a: Tensor, axis: int) -> int:
    nd = a.ndim
    if not -nd <= axis < nd:
        raise DimensionError(f"axis {axis} out of range for shape {a.shape}")
    return axis % nd


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` is (..., m, k). ``b`` is either (k, n), shared across the leading
    axes of ``a``, or (..., k, n) with exactly the same leading axes.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dimensions differ, {a.shape} vs {b.shape}")
    A, B = a.data, b.data
    out = A @ B

    def bw(g):
        ga = g @ np.swapaxes(B, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if B.ndim == 2:
                gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(A, -1, -2) @ g
        return ga, gb

    return _record(out, (a, b), bw)


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return _record(a.data + b, (a,), lambda g: (g,))
    _check_same("add", a, b)
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return _record(a.data - b, (a,), lambda g: (g,))
    _check_same("sub", a, b)
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return scale(a, b)
    _check_same("mul", a, b)
    A, B = a.data, b.data
    return _record(A * B, (a, b), lambda g: (g * B if a.requires_grad else None,
                                             g * A if b.requires_grad else None))


def div(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return scale(a, 1.0 / b)
    _check_same("div", a, b)
    A, B = a.data, b.data
    out = A / B
    return _record(out, (a, b), lambda g: (g / B if a.requires_grad else None,
                                           -g * out / B if b.requires_grad else None))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    gate = a.data > 0
    return _record(np.where(gate, a.data, 0.0), (a,), lambda g: (g * gate,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _record(np.log(x), (a,), lambda g: (g / x,))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0.0, x)

    def bw(g):
        e = np.exp(-np.abs(x))
        sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return (g * sig,)

    return _record(out, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def absolute(a: Tensor) -> Tensor:
    x = a.data
    return _record(np.abs(x), (a,), lambda g: (g * np.sign(x),))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (g * 0.5 / out,))


def square(a: Tensor) -> Tensor:
    x = a.data
    return _record(x * x, (a,), lambda g: (2.0 * g * x,))


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data)


# ---------------------------------------------------------------- reductions

def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    if axis is None:
        shape = a.shape
        return _record(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))
    ax = _axis(a, axis)
    out = a.data.sum(axis=ax, keepdims=keepdims)
    shape = a.shape

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, ax)
        return (np.broadcast_to(gk, shape).copy(),)

    return _record(out, (a,), bw)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[_axis(a, axis)]
    return scale(sum(a, axis, keepdims), 1.0 / n)


def max_pool(a: Tensor, axis: int = -2) -> Tensor:
    """Maximum along ``axis`` (the point axis by default).

    Backward routes the gradient to the first maximal index only.
    """
    ax = _axis(a, axis)
    idx = np.argmax(a.data, axis=ax)
    out = np.take_along_axis(a.data, np.expand_dims(idx, ax), axis=ax).squeeze(ax)
    shape = a.shape

    def bw(g):
        gi = np.zeros(shape)
        np.put_along_axis(gi, np.expand_dims(idx, ax), np.expand_dims(g, ax), axis=ax)
        return (gi,)

    return _record(out, (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    first = tensors[0]
    ax = _axis(first, axis)
    for t in tensors[1:]:
        if t.ndim != first.ndim or t.shape[:ax] + t.shape[ax + 1:] != first.shape[:ax] + first.shape[ax + 1:]:
            raise DimensionError(f"concat: incompatible shapes {first.shape} and {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _record(out, tuple(tensors), bw)


def take(a: Tensor, index) -> Tensor:
    """Numpy-style indexing (row slices, integer arrays); gradients scatter-add back."""
    out = a.data[index]
    shape = a.shape

    def bw(g):
        gi = np.zeros(shape)
        np.add.at(gi, index, g)
        return (gi,)

    return _record(np.array(out, dtype=np.float64), (a,), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    ax = _axis(a, axis)
    z = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return _record(out, (a,), bw)


def layer_norm(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Zero-mean, unit-variance normalisation over the last axis (no affine part)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gxm),)

    return _record(out, (a,), bw)


def norm(a: Tensor) -> Tensor:
    """Euclidean norm over the last axis; the gradient at the origin is taken as zero."""
    x = a.data
    out = np.sqrt((x * x).sum(axis=-1))

    def bw(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out[..., None] > 0, x / safe[..., None], 0.0) * g[..., None],)

    return _record(out, (a,), bw)


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale rows of the last axis to unit Euclidean length."""
    x = a.data
    n = np.sqrt((x * x).sum(axis=-1, keepdims=True) + eps * eps)
    out = x / n

    def bw(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / n,)

    return _record(out, (a,), bw)


# ---------------------------------------------------------------- shapes

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {old} to {tuple(shape)}") from exc
    return _record(out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def expand(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast of ``a`` to ``shape`` (numpy rules, leading axes added)."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise DimensionError(f"cannot expand {a.shape} to {shape}") from exc
    src = a.shape
    lead = len(shape) - len(src)

    def bw(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _record(np.ascontiguousarray(out), (a,), bw)


def _fold_shift(g: np.ndarray, offset: int, axis: int) -> np.ndarray:
    """Adjoint of gathering index clip(i + offset) along ``axis``."""
    if offset == 0:
        return g
    out = np.zeros_like(g)
    n = g.shape[axis]
    src = [slice(None)] * g.ndim
    dst = [slice(None)] * g.ndim
    edge_src = [slice(None)] * g.ndim
    edge_dst = [slice(None)] * g.ndim
    if offset < 0:
        src[axis], dst[axis] = slice(1, n), slice(0, n - 1)
        edge_src[axis] = edge_dst[axis] = slice(0, 1)
    else:
        src[axis], dst[axis] = slice(0, n - 1), slice(1, n)
        edge_src[axis] = edge_dst[axis] = slice(n - 1, n)
    out[tuple(dst)] += g[tuple(src)]
    out[tuple(edge_dst)] += g[tuple(edge_src)]
    return out


def unfold3x3(a: Tensor) -> Tensor:
    """Gather 3x3 neighbourhoods of a (B, H, W, C) map into (B, H, W, 9C).

    Edges are replicated, so output spatial size equals input size.
    Neighbour order is row-major over offsets (-1, 0, 1) x (-1, 0, 1).
    """
    if a.ndim != 4:
        raise DimensionError(f"unfold3x3 expects (B, H, W, C), got {a.shape}")
    x = a.data
    B, H, W, C = x.shape
    rows = np.clip(np.arange(H)[:, None] + np.array([-1, 0, 1])[None, :], 0, H - 1)
    cols = np.clip(np.arange(W)[:, None] + np.array([-1, 0, 1])[None, :], 0, W - 1)
    parts = [x[:, rows[:, di]][:, :, cols[:, dj]] for di in range(3) for dj in range(3)]
    out = np.concatenate(parts, axis=-1)

    def bw(g):
        gi = np.zeros_like(x)
        k = 0
        for di in range(3):
            for dj in range(3):
                gk = g[..., k * C:(k + 1) * C]
                gi += _fold_shift(_fold_shift(gk, dj - 1, 2), di - 1, 1)
                k += 1
        return (gi,)

    return _record(out, (a,), bw)


def parameters_of(modules: Iterable) -> list[Tensor]:
    out: list[Tensor] = []
    for m in modules:
        out.extend(m.parameters())
    return out
