"""Minimal dense-tensor library with reverse-mode automatic differentiation.

Everything is float64 on a numpy backend. Each operation that sees a tensor
requiring gradients records a backward closure on the output; calling
``backward()`` on a scalar root replays those closures in reverse topological
order, so every node is visited exactly once. Gradients accumulate additively
across fan-out; callers must zero them between optimization steps.

Broadcasting is deliberately restricted to scalars and exact shape matches.
Row-vector broadcasts (bias additions and the like) go through dedicated ops
so that shape bugs fail loudly instead of broadcasting silently.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


class GraphError(RuntimeError):
    """Raised on misuse of the recorded computation graph."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


class Tensor:
    """Dense float64 array with optional gradient tracking.

    Attributes:
        data: the raw ndarray (row-major, float64).
        grad: accumulated gradient ndarray of identical shape, or None.
        requires_grad: whether this tensor participates in backward.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._backward_done = False

    # -- constructors -------------------------------------------------------

    @classmethod
    def zeros(cls, *shape: int, requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(shape), requires_grad=requires_grad)

    @classmethod
    def ones(cls, *shape: int, requires_grad: bool = False) -> "Tensor":
        return cls(np.ones(shape), requires_grad=requires_grad)

    # -- basics -------------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph plumbing ------------------------------------------------------

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
            self.grad = self.grad.reshape(self.data.shape)
        else:
            self.grad += g.reshape(self.data.shape)

    def backward(self):
        """Populate d(self)/d(leaf) on every requires_grad leaf under self.

        self must be scalar. Calling backward twice on the same root without
        rebuilding the graph is an error (closures would re-accumulate).
        """
        if self.data.size != 1:
            raise GraphError(f"backward root must be scalar, got shape {self.shape}")
        if self._backward_done:
            raise GraphError("backward already ran on this graph; rebuild it before calling again")
        self._backward_done = True

        topo = _toposort(self)
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self) -> "Tensor":
        return tsum(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)


def _toposort(root: Tensor) -> list:
    """Iterative post-order over the recorded graph (tape depth can exceed
    the interpreter recursion limit for long recurrent forwards)."""
    topo = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return topo


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def _is_scalar_operand(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def _check_elementwise(a: Tensor, b: Tensor, op: str):
    # Permitted: exact shape match, or either side a single-element tensor.
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are neither equal nor scalar")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Collapse a gradient onto a scalar operand's shape."""
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape) if np.prod(shape, dtype=int) == 1 else g.reshape(shape)


# -- elementwise ops ---------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if _is_scalar_operand(b):
        a_ = a

        def bwd(g):
            a_._accumulate(g)

        return _make(a.data + float(b), (a,), bwd)
    _check_elementwise(a, b, "add")
    out_data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g, a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(g, b.shape))

    return _make(out_data, (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    if _is_scalar_operand(b):
        c = float(b)

        def bwd(g):
            a._accumulate(g * c)

        return _make(a.data * c, (a,), bwd)
    _check_elementwise(a, b, "mul")
    out_data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(g * a.data, b.shape))

    return _make(out_data, (a, b), bwd)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def bwd(g):
        x._accumulate(g * (1.0 - y * y))

    return _make(y, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    y[~pos] = ex / (1.0 + ex)

    def bwd(g):
        x._accumulate(g * y * (1.0 - y))

    return _make(y, (x,), bwd)


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} and {b.shape}")
    out_data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(out_data, (a, b), bwd)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-d tensor, got {x.shape}")

    def bwd(g):
        x._accumulate(g.T)

    return _make(x.data.T.copy(), (x,), bwd)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    old = x.shape

    def bwd(g):
        x._accumulate(g.reshape(old))

    return _make(x.data.reshape(shape), (x,), bwd)


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements, producing a scalar tensor."""

    def bwd(g):
        x._accumulate(np.full(x.shape, float(g)))

    return _make(np.sum(x.data).reshape(()), (x,), bwd)


def concat(parts: list, axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat of an empty list")
    datas = [p.data for p in parts]
    out_data = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p._accumulate(g[tuple(idx)])

    return _make(out_data, tuple(parts), bwd)


def rows(matrix: Tensor, indices) -> Tensor:
    """Gather rows of a 2-d tensor (embedding lookup); gradient scatter-adds."""
    if matrix.data.ndim != 2:
        raise ShapeError(f"rows expects a 2-d tensor, got {matrix.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        idx = idx.reshape(-1)
    n = matrix.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"row index out of range for matrix with {n} rows")

    def bwd(g):
        acc = np.zeros_like(matrix.data)
        np.add.at(acc, idx, g)
        matrix._accumulate(acc)

    return _make(matrix.data[idx], (matrix,), bwd)


def add_rowvec(mat: Tensor, vec: Tensor) -> Tensor:
    """mat (n, d) + vec (d,) broadcast over rows, as an explicit op."""
    if mat.data.ndim != 2 or vec.data.ndim != 1 or mat.shape[1] != vec.shape[0]:
        raise ShapeError(f"add_rowvec: incompatible shapes {mat.shape} and {vec.shape}")
    out_data = mat.data + vec.data[None, :]

    def bwd(g):
        if mat.requires_grad:
            mat._accumulate(g)
        if vec.requires_grad:
            vec._accumulate(g.sum(axis=0))

    return _make(out_data, (mat, vec), bwd)


def outer_add(a: Tensor, b: Tensor) -> Tensor:
    """a (T, d) and b (U, d) -> out (T, U, d) with out[t, u] = a[t] + b[u]."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"outer_add: incompatible shapes {a.shape} and {b.shape}")
    out_data = a.data[:, None, :] + b.data[None, :, :]

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g.sum(axis=1))
        if b.requires_grad:
            b._accumulate(g.sum(axis=0))

    return _make(out_data, (a, b), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Row-wise layer normalization over the last axis of a 2-d tensor."""
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm expects a 2-d tensor, got {x.shape}")
    d = x.shape[1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gain.data[None, :] + bias.data[None, :]

    def bwd(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data[None, :]
            m1 = gx.mean(axis=1, keepdims=True)
            m2 = (gx * xhat).mean(axis=1, keepdims=True)
            x._accumulate((gx - m1 - xhat * m2) * inv)

    return _make(out_data, (x, gain, bias), bwd)


# -- softmax family ----------------------------------------------------------


def log_softmax(x: Tensor) -> Tensor:
    """Numerically stable log-softmax along the last axis."""
    if x.data.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError(f"log_softmax needs a non-empty last axis, got shape {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    y = shifted - lse

    def bwd(g):
        x._accumulate(g - np.exp(y) * g.sum(axis=-1, keepdims=True))

    return _make(y, (x,), bwd)


def softmax(x: Tensor) -> Tensor:
    """Stable softmax along the last axis."""
    if x.data.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError(f"softmax needs a non-empty last axis, got shape {x.shape}")
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        x._accumulate(s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _make(s, (x,), bwd)


# -- custom-op hook ----------------------------------------------------------


def custom_op(inputs: tuple, out_data: np.ndarray, backward) -> Tensor:
    """Record an operation with a hand-written backward closure.

    ``backward(g)`` receives the output gradient and is responsible for
    calling ``_accumulate`` on whichever inputs require gradients.
    """
    return _make(out_data, tuple(inputs), backward)


# -- gradient checking -------------------------------------------------------


def finite_diff_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Compare analytic gradients of scalar-valued ``f`` against central
    differences, coordinate by coordinate.

    Returns max over coordinates of |analytic - numeric| / max(1, |numeric|).
    ``f`` must be deterministic; ``x`` must require gradients.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not x.requires_grad:
        raise GraphError("finite_diff_check needs x.requires_grad = True")
    x.zero_grad()
    out = f(x)
    if out.data.size != 1:
        raise GraphError(f"f must return a scalar, got shape {out.shape}")
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    flat = x.data.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(x).data)
            flat[i] = orig - eps
            fm = float(f(x).data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
    x.zero_grad()
    return worst


def logsumexp(values) -> float:
    """Stable log-sum-exp of a 1-d float array (helper for oracles)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return -math.inf
    m = arr.max()
    if not np.isfinite(m):
        return float(m)
    return float(m + math.log(np.sum(np.exp(arr - m))))
