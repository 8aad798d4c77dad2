"""Reverse-mode automatic differentiation over dense float64 arrays.

Values flow through :class:`Tensor` objects. While a :class:`Tape` is active
(``with Tape() as tape:``) every primitive records a node holding its value
and one vector-Jacobian closure per recorded parent. ``tape.backward(root)``
walks the nodes in reverse and returns gradients for the tape's leaves.

Tensors created outside a tape, or never passed to ``tape.variable``, are
constants: no closures are built for them, which keeps attack loops from
paying for weight gradients they never use.
"""
from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "KINDS",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "add",
    "affine",
    "backward",
    "concat",
    "forward_op",
    "gather",
    "l2_normalize",
    "log_softmax",
    "matmul",
    "max_const",
    "mean",
    "multiply",
    "norm",
    "relu",
    "reshape",
    "scale",
    "softmax",
    "sq_norm",
    "sqrt",
    "subtract",
    "tanh",
    "total",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for ``op``."""

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes " + " vs ".join(str(s) for s in shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class TapeError(RuntimeError):
    pass


_active: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("attrcloak_tape", default=None)


class Tensor:
    """An n-dimensional float64 value, optionally bound to a node on a tape."""

    __slots__ = ("value", "tape", "index")

    def __init__(self, value, *, _tape: "Tape | None" = None, _index: int = -1):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = _tape
        self.index = _index

    @property
    def dims(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def data(self) -> np.ndarray:
        return self.value.reshape(-1)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def numpy(self) -> np.ndarray:
        return self.value.copy()

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError("item", self.dims, detail="expected a single element")
        return float(self.value.reshape(-1)[0])

    def __repr__(self) -> str:
        where = f", node={self.index}" if self.tape is not None else ""
        return f"Tensor(shape={self.dims}{where})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return multiply(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Node:
    kind: str
    parents: tuple[int, ...]
    value: np.ndarray
    vjps: tuple[Callable[[np.ndarray], np.ndarray], ...] = ()
    adjoint: np.ndarray | None = None


@dataclass
class Tape:
    """Append-only record of primitive applications.

    Nodes are stored in execution order, so parents always precede children.
    """

    nodes: list[Node] = field(default_factory=list)
    leaves: list[Tensor] = field(default_factory=list)
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        if self._token is not None:
            raise TapeError("tape is already active")
        self._token = _active.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.reset(self._token)
        self._token = None

    def variable(self, value) -> Tensor:
        """Record a leaf whose gradient ``backward`` will report."""
        if isinstance(value, Tensor):
            value = value.value
        arr = np.array(value, dtype=np.float64)
        self.nodes.append(Node("leaf", (), arr))
        t = Tensor(arr, _tape=self, _index=len(self.nodes) - 1)
        self.leaves.append(t)
        return t

    def _record(self, kind: str, out: np.ndarray, inputs: Sequence[Tensor], vjps) -> Tensor:
        parents = []
        closures = []
        for t, fn in zip(inputs, vjps):
            if t.tape is None:
                continue
            if t.tape is not self:
                raise TapeError(f"{kind}: operand belongs to a different tape")
            parents.append(t.index)
            closures.append(fn)
        if not parents:
            return Tensor(out)
        self.nodes.append(Node(kind, tuple(parents), out, tuple(closures)))
        return Tensor(out, _tape=self, _index=len(self.nodes) - 1)

    def backward(self, root: Tensor) -> dict[Tensor, np.ndarray]:
        """Gradients of scalar ``root`` with respect to every leaf on this tape.

        Leaves that ``root`` does not depend on get zero arrays.
        """
        if root.tape is not self or not (0 <= root.index < len(self.nodes)):
            raise TapeError("backward: root was not produced by a forward pass on this tape")
        if root.value.size != 1:
            raise TapeError(f"backward: root must be scalar, got shape {root.dims}")
        for node in self.nodes:
            node.adjoint = None
        self.nodes[root.index].adjoint = np.ones_like(self.nodes[root.index].value)
        for i in range(root.index, -1, -1):
            node = self.nodes[i]
            g = node.adjoint
            if g is None or not node.parents:
                continue
            for p, fn in zip(node.parents, node.vjps):
                contrib = fn(g)
                parent = self.nodes[p]
                if parent.adjoint is None:
                    parent.adjoint = contrib
                else:
                    parent.adjoint = parent.adjoint + contrib
        grads = {}
        for leaf in self.leaves:
            adj = self.nodes[leaf.index].adjoint
            grads[leaf] = np.zeros_like(leaf.value) if adj is None else np.asarray(adj, dtype=np.float64)
        return grads

    def gradient(self, root: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        grads = self.backward(root)
        return [grads[s] for s in sources]


def backward(tape: Tape, root: Tensor) -> dict[Tensor, np.ndarray]:
    return tape.backward(root)


# -- primitives -------------------------------------------------------------
#
# Each primitive maps raw arrays (plus static attributes) to
# (output, tuple of per-input vjp closures).

def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_scalar(a: np.ndarray) -> bool:
    return a.size == 1


def _unbroadcast(g: np.ndarray, like: np.ndarray) -> np.ndarray:
    if g.shape == like.shape:
        return g
    return np.reshape(g.sum(), like.shape)


def _elementwise_check(op, a, b):
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(op, a.shape, b.shape)


def _p_add(a, b):
    _elementwise_check("add", a, b)
    return a + b, (lambda g: _unbroadcast(g, a), lambda g: _unbroadcast(g, b))


def _p_subtract(a, b):
    _elementwise_check("subtract", a, b)
    return a - b, (lambda g: _unbroadcast(g, a), lambda g: _unbroadcast(-g, b))


def _p_multiply(a, b):
    _elementwise_check("multiply", a, b)
    return a * b, (lambda g: _unbroadcast(g * b, a), lambda g: _unbroadcast(g * a, b))


def _p_scale(a, *, factor):
    f = float(factor)
    return a * f, (lambda g: g * f,)


def _p_matmul(a, b):
    if a.ndim not in (1, 2) or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = a @ b
    if a.ndim == 1:
        return out, (lambda g: b @ g, lambda g: np.outer(a, g))
    return out, (lambda g: g @ b.T, lambda g: a.T @ g)


def _p_affine(x, w, b):
    if x.ndim not in (1, 2) or w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError("affine", x.shape, w.shape)
    if b.shape != (w.shape[1],):
        raise ShapeError("affine", w.shape, b.shape, detail="bias length must equal output width")
    out = x @ w + b
    if x.ndim == 1:
        return out, (lambda g: w @ g, lambda g: np.outer(x, g), lambda g: g)
    return out, (lambda g: g @ w.T, lambda g: x.T @ g, lambda g: g.sum(axis=0))


def _p_relu(a):
    mask = a > 0
    return np.where(mask, a, 0.0), (lambda g: g * mask,)


def _p_tanh(a):
    y = np.tanh(a)
    return y, (lambda g: g * (1.0 - y * y),)


def _p_softmax(a):
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ShapeError("softmax", a.shape, detail="last axis is empty")
    z = a - a.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    return s, (lambda g: s * (g - (g * s).sum(axis=-1, keepdims=True)),)


def _p_log_softmax(a):
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ShapeError("log_softmax", a.shape, detail="last axis is empty")
    z = a - a.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return out, (lambda g: g - s * g.sum(axis=-1, keepdims=True),)


def _p_sum(a):
    return np.asarray(a.sum()), (lambda g: np.broadcast_to(g, a.shape).copy(),)


def _p_mean(a):
    if a.size == 0:
        raise ShapeError("mean", a.shape, detail="empty input")
    n = a.size
    return np.asarray(a.mean()), (lambda g: np.full(a.shape, float(g) / n),)


def _p_sq_norm(a):
    return np.asarray(np.dot(a.reshape(-1), a.reshape(-1))), (lambda g: 2.0 * float(g) * a,)


def _p_max_const(a, *, const):
    c = float(const)
    mask = a > c
    return np.where(mask, a, c), (lambda g: g * mask,)


def _p_gather(a, *, index):
    if a.ndim == 0:
        raise ShapeError("gather", a.shape, detail="cannot index a 0-d tensor")
    idx = np.asarray(index)
    n = a.shape[-1]
    if idx.ndim == 0:
        i = int(idx)
        if not -n <= i < n:
            raise ShapeError("gather", a.shape, detail=f"index {i} out of range")

        def vjp(g):
            out = np.zeros_like(a)
            out[..., i] = g
            return out

        return a[..., i].copy(), (vjp,)
    if idx.shape != a.shape[:-1]:
        raise ShapeError("gather", a.shape, idx.shape, detail="per-row indices must match leading dims")
    if np.any(idx < 0) or np.any(idx >= n):
        raise ShapeError("gather", a.shape, detail="index out of range")
    idx = idx.astype(np.intp)
    out = np.take_along_axis(a, idx[..., None], axis=-1)[..., 0]

    def vjp_rows(g):
        full = np.zeros_like(a)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        return full

    return out, (vjp_rows,)


def _p_concat(*arrays, axis=0):
    if not arrays:
        raise ShapeError("concat", detail="no operands")
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError as exc:
        raise ShapeError("concat", *(a.shape for a in arrays), detail=str(exc)) from None
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]

    def make(k):
        return lambda g: np.split(g, bounds, axis=axis)[k]

    return out, tuple(make(k) for k in range(len(arrays)))


def _p_reshape(a, *, shape):
    try:
        out = a.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return out, (lambda g: g.reshape(a.shape),)


def _p_sqrt(a):
    y = np.sqrt(a)
    return y, (lambda g: g * 0.5 / y,)


def _p_norm(a):
    n = float(np.sqrt(np.dot(a.reshape(-1), a.reshape(-1))))
    if n == 0.0:
        return np.asarray(0.0), (lambda g: np.zeros_like(a),)
    return np.asarray(n), (lambda g: float(g) * a / n,)


def _p_l2_normalize(a):
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ShapeError("l2_normalize", a.shape, detail="last axis is empty")
    n = np.sqrt((a * a).sum(axis=-1, keepdims=True))
    # a zero row maps to zero with zero gradient, as for norm at the origin
    safe = np.where(n > 0, n, 1.0)
    y = a / safe
    live = (n > 0).astype(a.dtype)
    return y, (lambda g: live * (g - y * (g * y).sum(axis=-1, keepdims=True)) / safe,)


_PRIMITIVES: dict[str, Callable] = {
    "add": _p_add,
    "subtract": _p_subtract,
    "multiply": _p_multiply,
    "scale": _p_scale,
    "matmul": _p_matmul,
    "affine": _p_affine,
    "relu": _p_relu,
    "tanh": _p_tanh,
    "softmax": _p_softmax,
    "log_softmax": _p_log_softmax,
    "sum": _p_sum,
    "mean": _p_mean,
    "sq_norm": _p_sq_norm,
    "max_const": _p_max_const,
    "gather": _p_gather,
    "concat": _p_concat,
    "reshape": _p_reshape,
    "sqrt": _p_sqrt,
    "norm": _p_norm,
    "l2_normalize": _p_l2_normalize,
}

KINDS = tuple(_PRIMITIVES)


def forward_op(kind: str, *inputs, **attrs) -> Tensor:
    """Apply primitive ``kind`` and record it on the active tape, if any."""
    try:
        prim = _PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    tensors = [_as_tensor(x) for x in inputs]
    out, vjps = prim(*(t.value for t in tensors), **attrs)
    tape = _active.get()
    if tape is None or not any(t.tape is not None for t in tensors):
        if any(t.tape is not None for t in tensors):
            raise TapeError(f"{kind}: operand is bound to a tape that is not active")
        return Tensor(out)
    return tape._record(kind, out, tensors, vjps)


def add(a, b) -> Tensor:
    return forward_op("add", a, b)


def subtract(a, b) -> Tensor:
    return forward_op("subtract", a, b)


def multiply(a, b) -> Tensor:
    return forward_op("multiply", a, b)


def scale(a, factor: float) -> Tensor:
    return forward_op("scale", a, factor=factor)


def matmul(a, b) -> Tensor:
    return forward_op("matmul", a, b)


def affine(x, w, b) -> Tensor:
    return forward_op("affine", x, w, b)


def relu(a) -> Tensor:
    return forward_op("relu", a)


def tanh(a) -> Tensor:
    return forward_op("tanh", a)


def softmax(a) -> Tensor:
    return forward_op("softmax", a)


def log_softmax(a) -> Tensor:
    return forward_op("log_softmax", a)


def total(a) -> Tensor:
    return forward_op("sum", a)


def mean(a) -> Tensor:
    return forward_op("mean", a)


def sq_norm(a) -> Tensor:
    return forward_op("sq_norm", a)


def max_const(a, const: float) -> Tensor:
    return forward_op("max_const", a, const=const)


def gather(a, index) -> Tensor:
    return forward_op("gather", a, index=index)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    return forward_op("concat", *tensors, axis=axis)


def reshape(a, shape: Sequence[int]) -> Tensor:
    return forward_op("reshape", a, shape=tuple(shape))


def sqrt(a) -> Tensor:
    return forward_op("sqrt", a)


def norm(a) -> Tensor:
    """Euclidean norm over all elements; subgradient 0 at the origin."""
    return forward_op("norm", a)


def l2_normalize(a) -> Tensor:
    return forward_op("l2_normalize", a)
