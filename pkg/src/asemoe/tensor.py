"""Dense float64 tensors with a small reverse-mode autodiff engine.

Every differentiable computation in the package goes through :func:`apply`,
which evaluates one op from a fixed vocabulary and, when any input is
tracked, appends a node to the thread's current :class:`Graph`.  Nodes are
appended in evaluation order, so the node list is already a topological
order and :func:`backward` just walks it in reverse.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

OPS = (
    "matmul",
    "add",
    "subtract",
    "multiply",
    "scale",
    "softmax",
    "exp",
    "log",
    "relu",
    "sum",
    "mean",
    "gather_rows",
    "concat",
    "transpose",
)


class ShapeError(ValueError):
    """Raised when an op receives operands whose shapes do not conform."""


class GraphError(RuntimeError):
    """Raised on invalid backward() usage."""


class Tensor:
    """A dense row-major float64 array that may participate in autodiff.

    A tensor is *tracked* if it is a leaf with ``requires_grad`` set or if
    it was produced by an op with at least one tracked input.
    """

    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self.node is not None

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operator sugar; every path still goes through apply().
    def __matmul__(self, other): return apply("matmul", self, _wrap(other))
    def __add__(self, other): return apply("add", self, _wrap(other))
    def __radd__(self, other): return apply("add", _wrap(other), self)
    def __sub__(self, other): return apply("subtract", self, _wrap(other))
    def __rsub__(self, other): return apply("subtract", _wrap(other), self)
    def __mul__(self, other):
        if np.isscalar(other):
            return apply("scale", self, factor=float(other))
        return apply("multiply", self, _wrap(other))
    def __rmul__(self, other): return self.__mul__(other)
    def __neg__(self): return apply("scale", self, factor=-1.0)

    @property
    def T(self) -> Tensor:
        return apply("transpose", self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    index: int = -1


@dataclass
class Graph:
    """Ordered record of op nodes; insertion order is topological order."""

    nodes: list[Node] = field(default_factory=list)
    consumed: bool = False

    def record(self, node: Node) -> None:
        if self.consumed:
            raise GraphError("graph already consumed by backward(); call reset_graph()")
        node.index = len(self.nodes)
        self.nodes.append(node)


_state = threading.local()


def current_graph() -> Graph:
    g = getattr(_state, "graph", None)
    if g is None:
        g = _state.graph = Graph()
    return g


def reset_graph() -> Graph:
    """Discard the current graph and start a fresh one for this thread."""
    _state.graph = Graph()
    return _state.graph


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate ops without recording any graph nodes."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


def _softmax(z: np.ndarray) -> np.ndarray:
    m = np.max(z, axis=-1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=-1, keepdims=True)


def _forward(op: str, xs: list[np.ndarray], kw: dict):
    """Return (output array, vjp closure) for one op."""
    if op == "matmul":
        a, b = xs
        if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
        out = a @ b

        def vjp(g):
            if a.ndim == 2 and b.ndim == 2:
                return g @ b.T, a.T @ g
            if a.ndim == 2:  # matrix @ vector
                return np.outer(g, b), a.T @ g
            if b.ndim == 2:  # vector @ matrix
                return b @ g, np.outer(a, g)
            return g * b, g * a
        return out, vjp

    if op in ("add", "subtract", "multiply"):
        a, b = xs
        _check_broadcast(op, a, b)
        if op == "add":
            out = a + b
            return out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
        if op == "subtract":
            out = a - b
            return out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
        out = a * b
        return out, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))

    if op == "scale":
        (a,) = xs
        c = float(kw["factor"])
        return a * c, lambda g: (g * c,)

    if op == "softmax":
        (z,) = xs
        if z.ndim == 0:
            raise ShapeError("softmax: needs at least one axis")
        s = _softmax(z)

        def vjp(g):
            return (s * (g - np.sum(g * s, axis=-1, keepdims=True)),)
        return s, vjp

    if op == "exp":
        (a,) = xs
        out = np.exp(a)
        return out, lambda g: (g * out,)

    if op == "log":
        (a,) = xs
        with np.errstate(divide="ignore"):
            out = np.log(a)
        return out, lambda g: (g / a,)

    if op == "relu":
        (a,) = xs
        mask = a > 0
        return np.where(mask, a, 0.0), lambda g: (g * mask,)

    if op in ("sum", "mean"):
        (a,) = xs
        axis = kw.get("axis")
        keepdims = kw.get("keepdims", False)
        if axis is not None and not -a.ndim <= axis < a.ndim:
            raise ShapeError(f"{op}: axis {axis} out of range for shape {a.shape}")
        out = a.sum(axis=axis, keepdims=keepdims) if op == "sum" else a.mean(axis=axis, keepdims=keepdims)
        count = a.size if axis is None else a.shape[axis]
        factor = 1.0 if op == "sum" else 1.0 / count

        def vjp(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g * factor, a.shape).copy(),)
        return np.asarray(out, dtype=np.float64), vjp

    if op == "gather_rows":
        (a,) = xs
        idx = np.asarray(kw["indices"], dtype=np.intp)
        if a.ndim == 0 or (idx.size and (idx.min() < -a.shape[0] or idx.max() >= a.shape[0])):
            raise ShapeError(f"gather_rows: indices out of range for shape {a.shape}")
        out = a[idx]

        def vjp(g):
            ga = np.zeros_like(a)
            np.add.at(ga, idx, g)
            return (ga,)
        return out, vjp

    if op == "concat":
        axis = kw.get("axis", -1)
        try:
            out = np.concatenate(xs, axis=axis)
        except ValueError:
            raise ShapeError(f"concat: shapes {[x.shape for x in xs]} do not conform on axis {axis}") from None
        bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return out, lambda g: tuple(np.split(g, bounds, axis=axis))

    if op == "transpose":
        (a,) = xs
        if a.ndim != 2:
            raise ShapeError(f"transpose: needs a matrix, got shape {a.shape}")
        return a.T.copy(), lambda g: (g.T,)

    raise ValueError(f"unknown op {op!r}; expected one of {OPS}")


_ARITY = {"matmul": 2, "add": 2, "subtract": 2, "multiply": 2}


def apply(op: str, *inputs: Tensor, **kw) -> Tensor:
    """Evaluate ``op`` on ``inputs`` and record a graph node if needed.

    Keyword arguments: ``factor`` (scale), ``axis``/``keepdims`` (sum, mean,
    concat), ``indices`` (gather_rows).
    """
    if op not in OPS:
        raise ValueError(f"unknown op {op!r}; expected one of {OPS}")
    want = _ARITY.get(op, None if op == "concat" else 1)
    if want is not None and len(inputs) != want:
        raise ShapeError(f"{op}: expected {want} inputs, got {len(inputs)}")
    if op == "concat" and not inputs:
        raise ShapeError("concat: needs at least one input")
    inputs = tuple(_wrap(x) for x in inputs)
    out_data, vjp = _forward(op, [x.data for x in inputs], kw)
    out = Tensor(out_data)
    if _grad_enabled() and any(x.tracked for x in inputs):
        node = Node(op, inputs, out, vjp)
        current_graph().record(node)
        out.node = node
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf.

    The graph that produced ``loss`` is consumed; a second call without
    building a new graph raises :class:`GraphError`.
    """
    if loss.size != 1:
        raise GraphError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise GraphError("backward() on an untracked tensor")
    graph = current_graph()
    if graph.consumed:
        raise GraphError("backward() already called on this graph; call reset_graph() first")
    if loss.node.index >= len(graph.nodes) or graph.nodes[loss.node.index] is not loss.node:
        raise GraphError("loss was not recorded in the current graph")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes[: loss.node.index + 1]):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for x, gx in zip(node.inputs, node.vjp(g)):
            if gx is None or not x.tracked:
                continue
            if x.node is None:
                x.grad = gx.copy() if x.grad is None else x.grad + gx
            else:
                key = id(x)
                grads[key] = grads[key] + gx if key in grads else gx
    graph.consumed = True
    reset_graph()


def finite_difference_grad(f: Callable[[Tensor], float | Tensor], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValueError("step h must be positive")

    def value(arr: np.ndarray) -> float:
        with no_grad():
            out = f(Tensor(arr))
        return out.item() if isinstance(out, Tensor) else float(out)

    base = x.data.copy()
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = value(base)
        flat[i] = orig - h
        down = value(base)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return Tensor(grad)


# Thin functional wrappers keep call sites readable.
def matmul(a, b): return apply("matmul", a, b)
def add(a, b): return apply("add", a, b)
def subtract(a, b): return apply("subtract", a, b)
def multiply(a, b): return apply("multiply", a, b)
def scale(a, c: float): return apply("scale", a, factor=c)
def softmax(a): return apply("softmax", a)
def exp(a): return apply("exp", a)
def log(a): return apply("log", a)
def relu(a): return apply("relu", a)
def tsum(a, axis=None, keepdims=False): return apply("sum", a, axis=axis, keepdims=keepdims)
def mean(a, axis=None, keepdims=False): return apply("mean", a, axis=axis, keepdims=keepdims)
def gather_rows(a, indices): return apply("gather_rows", a, indices=indices)
def concat(tensors, axis=-1): return apply("concat", *tensors, axis=axis)
def transpose(a): return apply("transpose", a)
