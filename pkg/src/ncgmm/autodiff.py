"""Small reverse-mode automatic differentiation engine.

Values are float64 numpy arrays of rank 0 (scalar), 1 (vector) or
2 (matrix).  Every primitive appends a node to a :class:`Tape`; since a
node can only reference nodes that already exist, the tape is in
topological order by construction and :meth:`Tape.backward` is a single
reverse sweep.

Subgradient convention: ``abs'(0) = 0`` and ``relu'(0) = 0``.
GELU uses the tanh approximation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ShapeError

__all__ = [
    "Tape", "NodeRef", "Gradients", "finite_diff_grad",
    "add", "sub", "scale", "mul", "matvec", "sum", "mean", "abs", "relu",
    "sigmoid", "gelu", "concat", "gelu_value", "gelu_grad",
]

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


def gelu_value(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + np.tanh(_SQRT_2_OVER_PI * (x + _GELU_C * x ** 3)))


def gelu_grad(x):
    x = np.asarray(x, dtype=np.float64)
    t = np.tanh(_SQRT_2_OVER_PI * (x + _GELU_C * x ** 3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * x * x)


def _sigmoid(x):
    # split by sign so exp never overflows
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass(frozen=True)
class NodeRef:
    """Handle to a node: its index on the tape and the value's shape."""

    tape: "Tape"
    id: int
    shape: tuple

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __hash__(self):
        return hash((id(self.tape), self.id))

    def __eq__(self, other):
        return isinstance(other, NodeRef) and other.tape is self.tape and other.id == self.id

    def __repr__(self):
        return f"NodeRef(id={self.id}, shape={self.shape})"


class _Node:
    __slots__ = ("kind", "parents", "value", "aux", "is_param")

    def __init__(self, kind, parents, value, aux=None, is_param=False):
        self.kind = kind
        self.parents = parents
        self.value = value
        self.aux = aux
        self.is_param = is_param


class Gradients:
    """Read-only map from :class:`NodeRef` to its adjoint."""

    def __init__(self, tape, adjoints):
        self._tape = tape
        self._adj = adjoints

    def __getitem__(self, ref: NodeRef) -> np.ndarray:
        if ref.tape is not self._tape:
            raise KeyError("node belongs to a different tape")
        g = self._adj[ref.id]
        if g is None:
            return np.zeros(ref.shape)
        return g

    def __contains__(self, ref):
        return isinstance(ref, NodeRef) and ref.tape is self._tape and 0 <= ref.id < len(self._adj)

    def params(self) -> dict:
        return {NodeRef(self._tape, i, n.value.shape): self[NodeRef(self._tape, i, n.value.shape)]
                for i, n in enumerate(self._tape.nodes) if n.is_param}


# forward: (values, aux_args) -> (value, aux)
# vjp: (adjoint, parent_values, out_value, aux, parent_index) -> parent adjoint
_FORWARD: dict[str, Callable] = {}
_VJP: dict[str, Callable] = {}


def _op(kind):
    def register(cls):
        _FORWARD[kind] = cls.forward
        _VJP[kind] = cls.vjp
        return cls
    return register


def _same_shape(kind, vals):
    shapes = [v.shape for v in vals]
    if any(s != shapes[0] for s in shapes):
        raise ShapeError(f"{kind}: operand shapes differ {shapes}")


@_op("add")
class _Add:
    @staticmethod
    def forward(vals, arg):
        _same_shape("add", vals)
        return vals[0] + vals[1], None

    @staticmethod
    def vjp(adj, vals, out, aux, i):
        return adj


@_op("sub")
class _Sub:
    @staticmethod
    def forward(vals, arg):
        _same_shape("sub", vals)
        return vals[0] - vals[1], None

    @staticmethod
    def vjp(adj, vals, out, aux, i):
        return adj if i == 0 else -adj


@_op("scale")
class _Scale:
    @staticmethod
    def forward(vals, c):
        return vals[0] * c, c

    @staticmethod
    def vjp(adj, vals, out, c, i):
        return adj * c


@_op("mul")
class _Mul:
    @staticmethod
    def forward(vals, arg):
        _same_shape("mul", vals)
        return vals[0] * vals[1], None

    @staticmethod
    def vjp(adj, vals, out, aux, i):
        return adj * vals[1 - i]


@_op("matvec")
class _Matvec:
    @staticmethod
    def forward(vals, arg):
        M, v = vals
        if M.ndim != 2 or v.ndim != 1 or M.shape[1] != v.shape[0]:
            raise ShapeError(f"matvec: incompatible shapes {M.shape} and {v.shape}")
        return M @ v, None

    @staticmethod
    def vjp(adj, vals, out, aux, i):
        M, v = vals
        if i == 0:
            return np.outer(adj, v)
        return M.T @ adj


@_op("sum")
class _Sum:
    @staticmethod
    def forward(vals, arg):
        return np.array(vals[0].sum()), None

    @staticmethod
    def vjp(adj, vals, out, aux, i):
        return np.full(vals[0].shape, float(adj))


@_op("mean")
class _Mean:
    @staticmethod
    def forward(vals, arg):
        if vals[0].size == 0:
            raise ShapeError("mean: empty operand")
        return np.array(vals[0].mean()), None

    @staticmethod
    def vjp(adj, vals, out, aux, i):
        return np.full(vals[0].shape, float(adj) / vals[0].size)


@_op("abs")
class _Abs:
    @staticmethod
    def forward(vals, arg):
        return np.abs(vals[0]), None

    @staticmethod
    def vjp(adj, vals, out, aux, i):
        return adj * np.sign(vals[0])


@_op("relu")
class _Relu:
    @staticmethod
    def forward(vals, arg):
        return np.maximum(vals[0], 0.0), None

    @staticmethod
    def vjp(adj, vals, out, aux, i):
        return adj * (vals[0] > 0.0)


@_op("sigmoid")
class _Sigmoid:
    @staticmethod
    def forward(vals, arg):
        return _sigmoid(vals[0]), None

    @staticmethod
    def vjp(adj, vals, out, aux, i):
        return adj * out * (1.0 - out)


@_op("gelu")
class _Gelu:
    @staticmethod
    def forward(vals, arg):
        return gelu_value(vals[0]), None

    @staticmethod
    def vjp(adj, vals, out, aux, i):
        return adj * gelu_grad(vals[0])


@_op("concat")
class _Concat:
    @staticmethod
    def forward(vals, arg):
        for v in vals:
            if v.ndim > 1:
                raise ShapeError(f"concat: operands must be scalars or vectors, got {v.shape}")
        sizes = [v.size for v in vals]
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        return np.concatenate([np.atleast_1d(v) for v in vals]), offsets

    @staticmethod
    def vjp(adj, vals, out, offsets, i):
        piece = adj[offsets[i]:offsets[i + 1]]
        return piece.reshape(vals[i].shape)


class Tape:
    """Append-only record of a computation.

    A tape is single-owner: build it and call :meth:`backward` from one
    thread.  Independent tapes may live on different threads.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def _push(self, kind, parents, value, aux=None, is_param=False) -> NodeRef:
        value = np.asarray(value, dtype=np.float64)
        if value.ndim > 2:
            raise ShapeError(f"{kind}: rank {value.ndim} values are not supported")
        self.nodes.append(_Node(kind, parents, value, aux, is_param))
        return NodeRef(self, len(self.nodes) - 1, value.shape)

    def param(self, value) -> NodeRef:
        """Leaf whose gradient is wanted."""
        return self._push("param", (), np.array(value, dtype=np.float64), is_param=True)

    def const(self, value) -> NodeRef:
        return self._push("const", (), np.array(value, dtype=np.float64))

    def lift(self, x) -> NodeRef:
        if isinstance(x, NodeRef):
            if x.tape is not self:
                raise ValueError("operand recorded on a different tape")
            return x
        return self.const(x)

    def apply(self, kind: str, *parents, arg=None) -> NodeRef:
        """Record primitive ``kind`` applied to ``parents``."""
        if kind not in _FORWARD:
            raise ValueError(f"unknown primitive {kind!r}")
        refs = tuple(self.lift(p) for p in parents)
        vals = [self.nodes[r.id].value for r in refs]
        value, aux = _FORWARD[kind](vals, arg)
        return self._push(kind, tuple(r.id for r in refs), value, aux)

    def value(self, ref: NodeRef) -> np.ndarray:
        return self.nodes[ref.id].value

    def backward(self, root: NodeRef) -> Gradients:
        """Reverse sweep from scalar ``root``.

        Adjoints live in a fresh buffer per call, so calling this twice on
        the same tape gives identical results.
        """
        if root.tape is not self:
            raise ValueError("root recorded on a different tape")
        if root.shape != ():
            raise ShapeError(f"backward: root must be a scalar, got shape {root.shape}")
        adj: list = [None] * len(self.nodes)
        adj[root.id] = np.array(1.0)
        nodes = self.nodes
        for i in range(root.id, -1, -1):
            a = adj[i]
            node = nodes[i]
            if a is None or not node.parents:
                continue
            vals = [nodes[p].value for p in node.parents]
            vjp = _VJP[node.kind]
            for j, p in enumerate(node.parents):
                g = vjp(a, vals, node.value, node.aux, j)
                adj[p] = g if adj[p] is None else adj[p] + g
        return Gradients(self, adj)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, NodeRef):
            return x.tape
    raise ValueError("at least one operand must be a NodeRef")


def add(a, b) -> NodeRef:
    return _tape_of(a, b).apply("add", a, b)


def sub(a, b) -> NodeRef:
    return _tape_of(a, b).apply("sub", a, b)


def scale(a: NodeRef, c: float) -> NodeRef:
    return a.tape.apply("scale", a, arg=float(c))


def mul(a, b) -> NodeRef:
    return _tape_of(a, b).apply("mul", a, b)


def matvec(M, v) -> NodeRef:
    """``M @ v`` where ``M`` may be a matrix node or a constant array."""
    return _tape_of(M, v).apply("matvec", M, v)


def sum(a: NodeRef) -> NodeRef:  # noqa: A001
    return a.tape.apply("sum", a)


def mean(a: NodeRef) -> NodeRef:
    return a.tape.apply("mean", a)


def abs(a: NodeRef) -> NodeRef:  # noqa: A001
    return a.tape.apply("abs", a)


def relu(a: NodeRef) -> NodeRef:
    return a.tape.apply("relu", a)


def sigmoid(a: NodeRef) -> NodeRef:
    return a.tape.apply("sigmoid", a)


def gelu(a: NodeRef) -> NodeRef:
    return a.tape.apply("gelu", a)


def concat(*parts) -> NodeRef:
    return _tape_of(*parts).apply("concat", *parts)


def finite_diff_grad(f, x, eps=1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at flat vector ``x``."""
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    x = np.array(x, dtype=np.float64).ravel()
    grad = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += eps
        xm[i] -= eps
        grad[i] = (float(f(xp)) - float(f(xm))) / (2.0 * eps)
    return grad
