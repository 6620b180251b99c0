"""Tape-based reverse-mode autodiff over float64 numpy arrays.

A :class:`Graph` is an append-only list of op records. Every op appends one
node whose inputs all have smaller ids, so the backward pass is a single walk
over the tape in reverse append order. Graphs are meant to be rebuilt for
every training step.

    g = Graph()
    w = g.param(weights)
    loss = ops.mean(ops.relu(x @ w))
    g.backward(loss)
    g.grad_of(weights)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

EXP_CLAMP = 40.0

Vjp = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class ShapeError(ValueError):
    """Raised when an op receives inputs whose shapes do not conform."""

    def __init__(self, op: str, *shapes: tuple):
        self.op = op
        self.shapes = shapes
        desc = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    vjp: Vjp | None = None


class Value:
    """A dense float64 array recorded on a graph."""

    __slots__ = ("data", "grad", "graph", "node", "requires_grad")
    __array_priority__ = 100.0

    def __init__(self, data: np.ndarray, graph: "Graph", node: int, requires_grad: bool):
        self.data = data
        self.grad: np.ndarray | None = None
        self.graph = graph
        self.node = node
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Value(shape={self.data.shape}, node={self.node})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

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

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


class Graph:
    """Append-only op tape.

    ``grad_enabled=False`` makes every leaf a constant, so ops skip their
    closures entirely; use it for inference rendering.
    """

    def __init__(self, grad_enabled: bool = True):
        self.nodes: list[Node] = []
        self.values: list[Value] = []
        self.grad_enabled = grad_enabled
        self._params: dict[int, Value] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def _append(self, data, kind, inputs: Sequence[Value], vjp: Vjp | None, requires_grad: bool) -> Value:
        data = np.asarray(data, dtype=np.float64)
        node = Node(kind, tuple(v.node for v in inputs), vjp if requires_grad else None)
        val = Value(data, self, len(self.nodes), requires_grad)
        self.nodes.append(node)
        self.values.append(val)
        return val

    def const(self, array) -> Value:
        return self._append(np.asarray(array, dtype=np.float64), "const", (), None, False)

    def param(self, array: np.ndarray) -> Value:
        """Leaf for a learnable array; the same array object maps to the same leaf."""
        key = id(array)
        hit = self._params.get(key)
        if hit is not None and hit.data is array:
            return hit
        if array.dtype != np.float64:
            raise TypeError("parameters must be float64 arrays")
        val = self._append(array, "param", (), None, self.grad_enabled)
        self._params[key] = val
        return val

    def grad_of(self, array: np.ndarray) -> np.ndarray:
        """Gradient accumulated on the leaf bound to ``array`` (zeros if unreached)."""
        val = self._params.get(id(array))
        if val is None or val.grad is None:
            return np.zeros_like(array)
        return val.grad

    def record(self, kind: str, inputs: Sequence[Value], data, vjp: Vjp) -> Value:
        """Append a custom op. ``vjp(grad_out)`` returns one gradient (or None) per input."""
        req = self.grad_enabled and any(v.requires_grad for v in inputs)
        return self._append(data, kind, inputs, vjp, req)

    def backward(self, root: Value) -> None:
        backward(self, root)


def backward(graph: Graph, root: Value) -> None:
    """Populate ``.grad`` of every value reachable from ``root``.

    Gradients accumulate additively over fan-out. ``root`` must hold exactly
    one element.
    """
    if root.data.size != 1:
        raise ShapeError("backward", root.data.shape)
    if root.graph is not graph:
        raise ValueError("root does not belong to this graph")
    for v in graph.values:
        v.grad = None
    root.grad = np.ones_like(root.data)
    values = graph.values
    nodes = graph.nodes
    for i in range(root.node, -1, -1):
        node = nodes[i]
        val = values[i]
        if node.vjp is None or val.grad is None:
            continue
        in_grads = node.vjp(val.grad)
        for j, g in zip(node.inputs, in_grads):
            if g is None:
                continue
            target = values[j]
            if not target.requires_grad:
                continue
            if target.grad is None:
                target.grad = np.array(g, dtype=np.float64, copy=True).reshape(target.data.shape)
            else:
                target.grad += g


# ----------------------------------------------------------------------------
# helpers


def _graph_of(args) -> Graph:
    for a in args:
        if isinstance(a, Value):
            return a.graph
    raise TypeError("at least one operand must be a Value")


def _lift(g: Graph, x) -> Value:
    if isinstance(x, Value):
        if x.graph is not g:
            raise ValueError("operands belong to different graphs")
        return x
    return g.const(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ----------------------------------------------------------------------------
# elementwise binary


def add(a, b) -> Value:
    g = _graph_of((a, b))
    a, b = _lift(g, a), _lift(g, b)
    _broadcast_shape("add", a.data, b.data)
    sa, sb = a.data.shape, b.data.shape
    return g.record("add", (a, b), a.data + b.data,
                    lambda go: (_unbroadcast(go, sa), _unbroadcast(go, sb)))


def sub(a, b) -> Value:
    g = _graph_of((a, b))
    a, b = _lift(g, a), _lift(g, b)
    _broadcast_shape("sub", a.data, b.data)
    sa, sb = a.data.shape, b.data.shape
    return g.record("sub", (a, b), a.data - b.data,
                    lambda go: (_unbroadcast(go, sa), _unbroadcast(-go, sb)))


def mul(a, b) -> Value:
    g = _graph_of((a, b))
    a, b = _lift(g, a), _lift(g, b)
    _broadcast_shape("mul", a.data, b.data)
    ad, bd = a.data, b.data

    def vjp(go):
        return (_unbroadcast(go * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(go * ad, bd.shape) if b.requires_grad else None)

    return g.record("mul", (a, b), ad * bd, vjp)


def div(a, b) -> Value:
    g = _graph_of((a, b))
    a, b = _lift(g, a), _lift(g, b)
    _broadcast_shape("div", a.data, b.data)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(go):
        ga = _unbroadcast(go / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-go * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return g.record("div", (a, b), out, vjp)


def maximum(a: Value, floor: float) -> Value:
    """Elementwise max against a constant; gradient flows where ``a > floor``."""
    keep = a.data > floor
    return a.graph.record("maximum", (a,), np.where(keep, a.data, floor), lambda go: (go * keep,))


def minimum(a: Value, ceil: float) -> Value:
    keep = a.data < ceil
    return a.graph.record("minimum", (a,), np.where(keep, a.data, ceil), lambda go: (go * keep,))


# ----------------------------------------------------------------------------
# elementwise unary


def neg(a: Value) -> Value:
    return a.graph.record("negate", (a,), -a.data, lambda go: (-go,))


def relu(a: Value) -> Value:
    mask = a.data > 0
    return a.graph.record("relu", (a,), a.data * mask, lambda go: (go * mask,))


def sigmoid(a: Value) -> Value:
    s = expit(a.data)
    return a.graph.record("sigmoid", (a,), s, lambda go: (go * s * (1.0 - s),))


def exp(a: Value) -> Value:
    """exp with inputs clamped at +40; no gradient inside the clamp region."""
    live = a.data <= EXP_CLAMP
    out = np.exp(np.minimum(a.data, EXP_CLAMP))
    return a.graph.record("exp", (a,), out, lambda go: (go * out * live,))


def sqrt(a: Value) -> Value:
    out = np.sqrt(a.data)
    return a.graph.record("sqrt", (a,), out, lambda go: (go * 0.5 / out,))


def square(a: Value) -> Value:
    d = a.data
    return a.graph.record("square", (a,), d * d, lambda go: (2.0 * go * d,))


def abs(a: Value) -> Value:  # noqa: A001 - mirrors numpy naming
    sgn = np.sign(a.data)
    return a.graph.record("abs", (a,), np.abs(a.data), lambda go: (go * sgn,))


# ----------------------------------------------------------------------------
# reductions


def sum(a: Value, axis=None, keepdims: bool = False) -> Value:  # noqa: A001
    shape = a.data.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(go):
        if axis is not None and not keepdims:
            go = np.expand_dims(go, axis)
        return (np.broadcast_to(go, shape),)

    return a.graph.record("sum", (a,), out, vjp)


def mean(a: Value, axis=None, keepdims: bool = False) -> Value:
    shape = a.data.shape
    count = a.data.size if axis is None else int(np.prod([shape[i] for i in np.atleast_1d(axis)]))
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def vjp(go):
        if axis is not None and not keepdims:
            go = np.expand_dims(go, axis)
        return (np.broadcast_to(go / count, shape),)

    return a.graph.record("mean", (a,), out, vjp)


def squared_norm(a: Value, axis=None, keepdims: bool = False) -> Value:
    d = a.data
    out = np.sum(d * d, axis=axis, keepdims=keepdims)

    def vjp(go):
        if axis is not None and not keepdims:
            go = np.expand_dims(go, axis)
        return (2.0 * go * d,)

    return a.graph.record("squared_norm", (a,), out, vjp)


# ----------------------------------------------------------------------------
# linear algebra and structure


def matmul(a, b) -> Value:
    g = _graph_of((a, b))
    a, b = _lift(g, a), _lift(g, b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError("matmul", ad.shape, bd.shape)
    try:
        out = ad @ bd
    except ValueError:
        raise ShapeError("matmul", ad.shape, bd.shape) from None

    def vjp(go):
        ga = _unbroadcast(go @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ go, bd.shape) if b.requires_grad else None
        return ga, gb

    return g.record("matmul", (a, b), out, vjp)


def broadcast_to(a: Value, shape) -> Value:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError("broadcast", a.data.shape, shape) from None
    src = a.data.shape
    return a.graph.record("broadcast", (a,), out, lambda go: (_unbroadcast(go, src),))


def reshape(a: Value, shape) -> Value:
    src = a.data.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, tuple(shape)) from None
    return a.graph.record("reshape", (a,), out, lambda go: (go.reshape(src),))


def transpose(a: Value, axes=None) -> Value:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inv = np.argsort(axes)
    return a.graph.record("transpose", (a,), np.transpose(a.data, axes),
                          lambda go: (np.transpose(go, inv),))


def swap_last(a: Value) -> Value:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def concat(values: Sequence, axis: int = -1) -> Value:
    g = _graph_of(values)
    vals = [_lift(g, v) for v in values]
    try:
        out = np.concatenate([v.data for v in vals], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[v.data.shape for v in vals]) from None
    sizes = [v.data.shape[axis] for v in vals]
    bounds = np.cumsum([0] + sizes)

    def vjp(go):
        return [np.take(go, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(vals))]

    return g.record("concat", vals, out, vjp)


def stack(values: Sequence, axis: int = -1) -> Value:
    g = _graph_of(values)
    vals = [_lift(g, v) for v in values]
    try:
        out = np.stack([v.data for v in vals], axis=axis)
    except ValueError:
        raise ShapeError("stack", *[v.data.shape for v in vals]) from None

    def vjp(go):
        return [np.take(go, i, axis=axis) for i in range(len(vals))]

    return g.record("stack", vals, out, vjp)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a: Value, idx) -> Value:
    src = a.data.shape
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def vjp(go):
        full = np.zeros(src)
        if basic:
            full[idx] += go
        else:
            np.add.at(full, idx, go)
        return (full,)

    return a.graph.record("index", (a,), out, vjp)


def take(a: Value, indices, axis: int = 0) -> Value:
    """Gather along ``axis``; repeated indices accumulate in the backward pass."""
    indices = np.asarray(indices, dtype=np.intp)
    src = a.data.shape
    out = np.take(a.data, indices, axis=axis)

    def vjp(go):
        full = np.zeros(src)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(go, axis, 0) if indices.ndim == 1 else go)
        return (full,)

    return a.graph.record("take", (a,), out, vjp)


def scatter_rows(a: Value, rows, n: int) -> Value:
    """Place the rows of ``a`` at ``rows`` of an ``n``-row zero array."""
    rows = np.asarray(rows, dtype=np.intp)
    out = np.zeros((n,) + a.data.shape[1:])
    out[rows] = a.data
    return a.graph.record("scatter", (a,), out, lambda go: (go[rows],))


# ----------------------------------------------------------------------------
# dispatch


_OPS: dict[str, Callable[..., Value]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "concat": lambda *xs, axis=-1: concat(xs, axis=axis),
    "stack": lambda *xs, axis=-1: stack(xs, axis=axis),
    "relu": relu,
    "sigmoid": sigmoid,
    "exp": exp,
    "sqrt": sqrt,
    "square": square,
    "abs": abs,
    "negate": neg,
    "sum": sum,
    "mean": mean,
    "squared_norm": squared_norm,
    "broadcast": broadcast_to,
    "reshape": reshape,
    "transpose": transpose,
    "maximum": maximum,
    "minimum": minimum,
    "index": getitem,
    "take": take,
}


def forward_op(kind: str, *inputs, **attrs) -> Value:
    """Run op ``kind`` by name, e.g. ``forward_op("relu", x)``."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **attrs)


def op_kinds() -> list[str]:
    return sorted(_OPS)


# ----------------------------------------------------------------------------
# positional encoding and gradient checking


def positional_encoding(v, num_frequencies: int) -> np.ndarray:
    """Interleaved sin/cos features ``[sin(2^j pi u), cos(2^j pi u)]``.

    Works on the last axis: an input of shape ``(..., D)`` yields
    ``(..., 2 * num_frequencies * D)``, coordinate-major, frequency-minor.
    """
    if num_frequencies < 0:
        raise ValueError("num_frequencies must be >= 0")
    v = np.asarray(v, dtype=np.float64)
    freqs = (2.0 ** np.arange(num_frequencies)) * np.pi
    ang = v[..., :, None] * freqs
    out = np.stack([np.sin(ang), np.cos(ang)], axis=-1)
    return out.reshape(v.shape[:-1] + (2 * num_frequencies * v.shape[-1],))


def finite_diff_check(
    f: Callable[..., Value],
    params: Sequence[np.ndarray],
    step: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between autodiff and central differences.

    ``f(graph, *values)`` must build a scalar on ``graph`` from the leaves
    bound to ``params``. The arrays are perturbed in place and restored.
    With ``max_coords`` only that many randomly chosen coordinates per array
    are compared.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    errs = check_gradients(f, params, step, max_coords, seed)
    return max((e for e in errs), default=0.0)


def check_gradients(f, params, step=1e-4, max_coords=None, seed=0) -> list[float]:
    """Per-array max relative error; see :func:`finite_diff_check`."""
    g = Graph()
    vals = [g.param(p) for p in params]
    root = f(g, *vals)
    g.backward(root)
    analytic = [g.grad_of(p).copy() for p in params]

    def evaluate() -> float:
        ng = Graph(grad_enabled=False)
        return float(f(ng, *[ng.param(p) for p in params]).data)

    rng = np.random.default_rng(seed)
    out: list[float] = []
    for p, grad in zip(params, analytic):
        flat = p.reshape(-1)
        if flat.base is not p and not np.shares_memory(flat, p):
            raise ValueError("parameters must be contiguous")
        coords: Iterable[int] = range(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        worst = 0.0
        gflat = grad.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            up = evaluate()
            flat[i] = orig - step
            down = evaluate()
            flat[i] = orig
            central = (up - down) / (2.0 * step)
            a = gflat[i]
            err = np.abs(a - central) / max(np.abs(a), np.abs(central), 1e-8)
            worst = max(worst, float(err))
        out.append(worst)
    return out
