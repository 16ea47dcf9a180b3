"""Dense tensors with tape-based reverse-mode differentiation.

Values are stored as float32 by default. Matrix products and softmax
reductions are carried out in float64 and rounded back to the storage
dtype. The storage dtype can be switched to float64 with :func:`precision`,
which the gradient tests use to keep finite differences meaningful.
"""

from __future__ import annotations

import contextlib
import contextvars
import itertools

import numpy as np

_DTYPE = contextvars.ContextVar("longsum_dtype", default=np.float32)
_GRAD_ENABLED = contextvars.ContextVar("longsum_grad_enabled", default=True)
_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GraphError(RuntimeError):
    """Raised on misuse of the recorded computation graph."""


def get_dtype():
    return _DTYPE.get()


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the storage dtype of newly created tensors."""
    token = _DTYPE.set(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.reset(token)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def grad_enabled():
    return _GRAD_ENABLED.get()


class Node:
    """One recorded operation: inputs, output id and the backward rule."""

    __slots__ = ("op", "inputs", "output_id", "backward_fn")

    def __init__(self, op, inputs, output_id, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output_id = output_id
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "id", "_node", "_consumed", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        dtype = dtype or _DTYPE.get()
        arr = np.asarray(data, dtype=dtype)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.id = next(_ids)
        self._node = None
        self._consumed = False
        self.name = name

    # -- basic properties -------------------------------------------------
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
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ShapeError(f"item() needs a single element, got shape {self.shape}")

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype.type)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    # -- differentiation ---------------------------------------------------
    def backward(self, retain_graph=False):
        backward(self, retain_graph=retain_graph)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype.type if like is not None else None
    return Tensor(x, dtype=dtype)


def _record(op, out_data, inputs, backward_fn):
    """Wrap ``out_data`` in a Tensor and record it on the tape when needed."""
    needs = _GRAD_ENABLED.get() and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs, dtype=out_data.dtype.type)
    if needs:
        out._node = Node(op, tuple(inputs), out.id, backward_fn)
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", out.astype(a.data.dtype, copy=False), (a, b), bw)


def sub(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _record("sub", out.astype(a.data.dtype, copy=False), (a, b), bw)


def mul(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        out = a.data * a.data.dtype.type(c)
        return _record("scale", out, (a,), lambda g: (g * c,))
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", out.astype(a.data.dtype, copy=False), (a, b), bw)


def relu(x):
    mask = x.data > 0
    return _record("relu", x.data * mask, (x,), lambda g: (g * mask,))


def exp(x):
    out = np.exp(x.data)
    return _record("exp", out, (x,), lambda g: (g * out,))


def log(x):
    return _record("log", np.log(x.data), (x,), lambda g: (g / x.data,))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(x, axis=None, keepdims=False):
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64), dtype=x.data.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.data.dtype),)

    return _record("sum", out, (x,), bw)


def mean(x, axis=None, keepdims=False):
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(x, shape):
    out = x.data.reshape(shape)
    return _record("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None):
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _record("transpose", out, (x,), lambda g: (g.transpose(inv),))


def take_rows(table, ids):
    """Gather rows of a 2-D ``table`` by integer ``ids`` of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]

    def bw(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (grad,)

    return _record("take_rows", out, (table,), bw)


def pick(x, index):
    """Select ``x[..., index[...]]`` along the last axis."""
    index = np.asarray(index, dtype=np.int64)
    out = np.take_along_axis(x.data, index[..., None], axis=-1)[..., 0]

    def bw(g):
        grad = np.zeros_like(x.data)
        np.put_along_axis(grad, index[..., None], g[..., None], axis=-1)
        return (grad,)

    return _record("pick", out, (x,), bw)


# ---------------------------------------------------------------------------
# linear algebra and normalisation
# ---------------------------------------------------------------------------

def _mm64(a, b):
    return np.matmul(a.astype(np.float64, copy=False), b.astype(np.float64, copy=False))


def matmul(a, b):
    """Batched matrix product over the last two axes."""
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    dtype = a.data.dtype
    out = _mm64(a.data, b.data).astype(dtype)

    def bw(g):
        ga = _mm64(g, np.swapaxes(b.data, -1, -2)).astype(dtype)
        gb = _mm64(np.swapaxes(a.data, -1, -2), g).astype(dtype)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", out, (a, b), bw)


def _softmax64(x, mask):
    z = x.astype(np.float64)
    if mask is not None:
        if not np.all(mask.any(axis=-1)):
            raise ValueError("softmax_rows: a row has every position masked")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(t, mask=None):
    """Softmax over the last axis; masked positions get exactly zero."""
    t = as_tensor(t)
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), t.shape)
    p64 = _softmax64(t.data, mask)
    out = p64.astype(t.data.dtype)

    def bw(g):
        g64 = g.astype(np.float64)
        gi = p64 * (g64 - (g64 * p64).sum(axis=-1, keepdims=True))
        return (gi.astype(t.data.dtype),)

    return _record("softmax", out, (t,), bw)


def log_softmax(t):
    z = t.data.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out64 = z - lse
    p64 = np.exp(out64)

    def bw(g):
        g64 = g.astype(np.float64)
        return ((g64 - p64 * g64.sum(axis=-1, keepdims=True)).astype(t.data.dtype),)

    return _record("log_softmax", out64.astype(t.data.dtype), (t,), bw)


def layer_norm(x, gamma, beta, eps=1e-5):
    x64 = x.data.astype(np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    xc = x64 - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = (xhat * gamma.data + beta.data).astype(x.data.dtype)
    d = x.shape[-1]

    def bw(g):
        g64 = g.astype(np.float64)
        lead = tuple(range(g.ndim - 1))
        dgamma = (g64 * xhat).sum(axis=lead)
        dbeta = g64.sum(axis=lead)
        gx = g64 * gamma.data
        dx = inv / d * (d * gx - gx.sum(-1, keepdims=True) - xhat * (gx * xhat).sum(-1, keepdims=True))
        dt = x.data.dtype
        return dx.astype(dt), dgamma.astype(dt), dbeta.astype(dt)

    return _record("layer_norm", out, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# custom operations
# ---------------------------------------------------------------------------

def custom_op(op, out_data, inputs, backward_fn):
    """Record an operation implemented outside this module (e.g. a kernel)."""
    return _record(op, out_data, inputs, backward_fn)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def graph_nodes(root):
    """Return the recorded nodes reachable from ``root`` in topological order."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if t._node is None:
            continue
        if expanded:
            order.append(t)
            continue
        if t.id in seen:
            continue
        seen.add(t.id)
        stack.append((t, True))
        for parent in t._node.inputs:
            if parent._node is not None and parent.id not in seen:
                stack.append((parent, False))
    return order


def backward(loss, retain_graph=False):
    """Populate ``grad`` on every requires_grad ancestor of a scalar ``loss``."""
    if loss.size != 1:
        raise GraphError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        raise GraphError("backward() called on a tensor that is not attached to a graph")
    if loss._consumed:
        raise GraphError("backward() already ran on this graph; rebuild it with a new forward pass")

    order = graph_nodes(loss)
    grads = {loss.id: np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.pop(t.id, None)
        if g is None:
            continue
        node = t._node
        parts = node.backward_fn(g)
        for parent, pg in zip(node.inputs, parts):
            if pg is None or not parent.requires_grad:
                continue
            if parent._node is None:
                pg = np.asarray(pg, dtype=parent.data.dtype)
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            elif parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg
    loss._consumed = not retain_graph
    if not retain_graph:
        for t in order:
            if t is not loss:
                t._node = None


def finite_difference_grad(f, x, eps=1e-3):
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``f`` receives a Tensor and returns a scalar Tensor or float. ``x`` is
    left unmodified.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(x.data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    dtype = x.data.dtype.type

    def evaluate(arr):
        with no_grad():
            val = f(Tensor(arr.reshape(base.shape), dtype=dtype))
        return float(val.item() if isinstance(val, Tensor) else val)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = evaluate(flat)
        flat[i] = orig - eps
        lo = evaluate(flat)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return Tensor(grad, dtype=dtype)
