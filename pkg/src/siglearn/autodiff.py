"""Minimal reverse-mode automatic differentiation over numpy arrays.

Tensors store float32 by default (float64 flows through unchanged, which is
what the finite-difference gradient checks use); reductions accumulate in
float64 before casting back. The graph is built eagerly by the op functions
below and freed after backward().
"""

import numpy as np

from .errors import InvalidArgumentError


class Tensor:
    """An n-d array with an optional gradient and a backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(
            data, dtype=np.float32)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- basic introspection ------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, " \
               f"requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # -- autodiff -----------------------------------------------------------
    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise InvalidArgumentError(
                    "backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor)
                   else -np.asarray(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(
            shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def result(data, parents, backward):
    """Build an op output: parents are Tensors feeding the backward closure."""
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    req = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        out._parents = parents
        out._backward = backward
    return out


def accumulate(t, g):
    """Add g into t.grad if t participates in differentiation.

    Gradients are never mutated in place, so sharing an array between two
    destinations is safe.
    """
    if not (t.requires_grad or t._parents):
        return
    g = g.astype(t.data.dtype, copy=False)
    t.grad = g if t.grad is None else t.grad + g


def _sum_to_shape(g, shape):
    """Reverse numpy broadcasting: reduce g back down to `shape`."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise and shape ops
# ---------------------------------------------------------------------------

def add(a, b):
    a = as_tensor(a)
    b_arr = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=a.dtype)
    data = a.data + b_arr

    def backward(g):
        accumulate(a, _sum_to_shape(g, a.shape))
        if isinstance(b, Tensor):
            accumulate(b, _sum_to_shape(g, b.shape))
    return result(data, (a, b), backward)


def mul(a, b):
    a = as_tensor(a)
    b_arr = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=a.dtype)
    data = a.data * b_arr

    def backward(g):
        accumulate(a, _sum_to_shape(g * b_arr, a.shape))
        if isinstance(b, Tensor):
            accumulate(b, _sum_to_shape(g * a.data, b.shape))
    return result(data, (a, b), backward)


def matmul(a, b):
    """a (..., m, k) @ b (k, n); b must be 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2:
        raise InvalidArgumentError("matmul: right operand must be 2-D")
    data = a.data @ b.data

    def backward(g):
        accumulate(a, g @ b.data.T)
        k, n = b.shape
        accumulate(b, a.data.reshape(-1, k).T @ g.reshape(-1, n))
    return result(data, (a, b), backward)


def reshape(a, shape):
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def backward(g):
        accumulate(a, g.reshape(a.shape))
    return result(data, (a,), backward)


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    data = np.ascontiguousarray(a.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def backward(g):
        accumulate(a, np.ascontiguousarray(g.transpose(inv)))
    return result(data, (a,), backward)


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def backward(g):
        off = 0
        for t, s in zip(tensors, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(off, off + s)
            accumulate(t, g[tuple(sl)])
            off += s
    return result(data, tuple(tensors), backward)


def narrow(a, axis, start, length):
    """Contiguous slice along one axis."""
    a = as_tensor(a)
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    data = np.ascontiguousarray(a.data[sl])

    def backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[sl] = g
        accumulate(a, full)
    return result(data, (a,), backward)


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------

def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    data = a.data * mask

    def backward(g):
        accumulate(a, g * mask)
    return result(data, (a,), backward)


def abs_(a):
    a = as_tensor(a)
    sign = np.sign(a.data)
    data = np.abs(a.data)

    def backward(g):
        accumulate(a, g * sign)
    return result(data, (a,), backward)


def square(a):
    a = as_tensor(a)
    data = a.data * a.data

    def backward(g):
        accumulate(a, g * (2.0 * a.data))
    return result(data, (a,), backward)


def exp(a):
    a = as_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        accumulate(a, g * data)
    return result(data, (a,), backward)


def log(a):
    a = as_tensor(a)
    data = np.log(a.data)

    def backward(g):
        accumulate(a, g / a.data)
    return result(data, (a,), backward)


def clamp_min(a, floor):
    a = as_tensor(a)
    mask = a.data > floor
    data = np.maximum(a.data, floor)

    def backward(g):
        accumulate(a, g * mask)
    return result(data, (a,), backward)


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    data = data.astype(x.dtype, copy=False)

    def backward(g):
        accumulate(a, g * data * (1.0 - data))
    return result(data, (a,), backward)


def tanh(a):
    a = as_tensor(a)
    data = np.tanh(a.data)

    def backward(g):
        accumulate(a, g * (1.0 - data * data))
    return result(data, (a,), backward)


def softplus(a):
    """log(1 + exp(x)), computed stably as max(x, 0) + log1p(exp(-|x|))."""
    a = as_tensor(a)
    x = a.data
    data = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        accumulate(a, g * sig.astype(x.dtype, copy=False))
    return result(data, (a,), backward)


# ---------------------------------------------------------------------------
# Reductions (float64 accumulation)
# ---------------------------------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64)
    data = np.asarray(data, dtype=a.dtype)

    def backward(g):
        if axis is None:
            accumulate(a, np.broadcast_to(g, a.shape))
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            if not keepdims:
                g = np.expand_dims(g, axes)
            accumulate(a, np.broadcast_to(g, a.shape))
    return result(data, (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def logsumexp(a, axis):
    """Row-stable log-sum-exp along `axis` (max subtracted, not in graph)."""
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    shifted = add(a, -m)
    return add(log(sum_(exp(shifted), axis=axis, keepdims=True)),
               np.asarray(m))


def gather_rows(a, col_idx):
    """Pick one column per row of a 2-D tensor: out[i] = a[i, col_idx[i]]."""
    a = as_tensor(a)
    rows = np.arange(a.shape[0])
    data = np.ascontiguousarray(a.data[rows, col_idx])

    def backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[rows, col_idx] = g
        accumulate(a, full)
    return result(data, (a,), backward)
