"""Dense float64 tensors with reverse-mode differentiation.

Every op builds its output eagerly and, when any input requires a gradient,
records a closure that maps the output gradient to input gradients.
:func:`backward` walks the recorded graph in reverse topological order.
"""
from __future__ import annotations

import os

import numpy as np
from scipy import sparse

DTYPE = np.float64

# Test builds set this (see tests/conftest.py) so a non-finite value fails at
# the op that produced it instead of surfacing later as a NaN loss.
CHECK_FINITE = os.environ.get("DRAPENET_CHECK_FINITE", "") not in ("", "0")


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op
        if CHECK_FINITE and not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite value produced by op {op or 'leaf'!r}")

    @property
    def shape(self):
        return self.data.shape

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op) -> Tensor:
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward, op)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), bw, "div")


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,), "square")


def sqrt(x: Tensor, eps: float = 0.0) -> Tensor:
    """sqrt(x + eps); the gradient is finite for x > -eps."""
    out = np.sqrt(x.data + eps)

    def bw(g):
        return (g * 0.5 / out,)

    return _make(out, (x,), bw, "sqrt")


def absolute(x: Tensor) -> Tensor:
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    scale = np.where(x.data > 0, 1.0, slope)
    return _make(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {W.shape}")
    out = x.data @ W.data
    if b is not None:
        out = out + b.data

    def bw(g):
        grads = [g @ W.data.T, x.data.T @ g]
        if b is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    parents = (x, W) if b is None else (x, W, b)
    return _make(out, parents, bw, "linear")


def concat(xs, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]}") from None
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, xs, bw, "concat")


def concat_cols(xs) -> Tensor:
    return concat(xs, axis=1)


def reduce_max(x: Tensor, axis: int) -> Tensor:
    """Max over one axis; the gradient goes to the first (lowest-index) maximizer."""
    arg = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make(out, (x,), bw, "max")


def row_max_pool(x: Tensor) -> Tensor:
    """(N, d) -> (1, d) column-wise max; ties route the gradient to the lowest row."""
    if x.data.ndim != 2 or x.shape[0] == 0:
        raise ShapeError(f"row_max_pool: expected non-empty 2-D input, got {x.shape}")
    arg = np.argmax(x.data, axis=0)
    cols = np.arange(x.shape[1])
    out = x.data[arg, cols][None, :]

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[arg, cols] = g[0]
        return (gx,)

    return _make(out, (x,), bw, "row_max_pool")


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), bw, "sum")


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(reduce_sum(x, axis, keepdims), 1.0 / n)


def row_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 2 or x.shape[0] == 0:
        raise ShapeError(f"row_avg_pool: expected non-empty 2-D input, got {x.shape}")
    return reduce_mean(x, axis=0, keepdims=True)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (x,), bw, "softmax")


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def repeat_rows(x: Tensor, n: int) -> Tensor:
    """(1, d) or (d,) -> (n, d)."""
    row = x.data.reshape(1, -1)
    return _make(np.repeat(row, n, axis=0), (x,), lambda g: (g.sum(axis=0).reshape(x.shape),), "repeat_rows")


def segment_sum(values: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    """out[idx[e]] += values[e] over the leading axis (sparse product; np.add.at is slow)."""
    idx = idx.ravel()
    flat = values.reshape(len(idx), -1)
    s = sparse.csr_matrix((np.ones(len(idx)), (idx, np.arange(len(idx)))), shape=(n, len(idx)))
    return np.asarray(s @ flat).reshape((n,) + values.shape[1:])


def gather_rows(x: Tensor, idx) -> Tensor:
    """x[idx] along axis 0; idx may have any shape."""
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        return (segment_sum(g.reshape((idx.size,) + x.shape[1:]), idx, x.shape[0]),)

    return _make(x.data[idx], (x,), bw, "gather_rows")


def head_mix(q: Tensor, z: Tensor, idx) -> Tensor:
    """out[e] = sum_m q[e, m] * z[idx[e], m, :] for q (E, M) and z (N, M, d)."""
    idx = np.asarray(idx, dtype=np.int64)
    if q.data.ndim != 2 or z.data.ndim != 3 or q.shape != (len(idx), z.shape[1]):
        raise ShapeError(f"head_mix: weights {q.shape}, values {z.shape}, {len(idx)} indices")
    zj = z.data[idx]

    def bw(g):
        dq = np.einsum("ed,emd->em", g, zj)
        dz = segment_sum(q.data[:, :, None] * g[:, None, :], idx, z.shape[0])
        return dq, dz

    return _make(np.einsum("em,emd->ed", q.data, zj), (q, z), bw, "head_mix")


def scatter_sum(x: Tensor, idx, n: int) -> Tensor:
    """Sum rows of x into n output rows: out[idx[e]] += x[e]."""
    idx = np.asarray(idx, dtype=np.int64)
    if len(idx) != x.shape[0]:
        raise ShapeError(f"scatter_sum: {len(idx)} indices for {x.shape[0]} rows")
    return _make(segment_sum(x.data, idx, n), (x,), lambda g: (g[idx],), "scatter_sum")


def index(x: Tensor, idx) -> Tensor:
    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(x.data[idx], (x,), bw, "index")


def cross_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cross product of (N, 3) tensors."""
    if a.shape != b.shape or a.shape[-1] != 3:
        raise ShapeError(f"cross_rows: expected matching (N, 3) inputs, got {a.shape} and {b.shape}")

    def bw(g):
        return np.cross(b.data, g), np.cross(g, a.data)

    return _make(np.cross(a.data, b.data), (a, b), bw, "cross")


def row_norm(x: Tensor, eps: float = 0.0) -> Tensor:
    """Euclidean norm of each row, (N, d) -> (N,); the gradient uses max(norm, eps)."""
    n = np.sqrt((x.data * x.data).sum(axis=-1))
    safe = np.maximum(n, eps) if eps > 0 else n

    def bw(g):
        with np.errstate(invalid="ignore", divide="ignore"):
            gx = x.data * (g / safe)[..., None]
        return (np.where(np.isfinite(gx), gx, 0.0),)

    return _make(n, (x,), bw, "row_norm")


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable tensor requiring grad."""
    if root.data.size != 1:
        raise ShapeError(f"backward: root must be a scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if not p.requires_grad:
                continue
            if CHECK_FINITE and not np.all(np.isfinite(pg)):
                raise FloatingPointError(f"non-finite gradient from op {node.op!r}")
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg
