"""Sparse (window + global) attention and the dense reference used to check it."""

from __future__ import annotations

import math

import numpy as np

from . import kernels
from .pattern import AttentionPattern, build_pattern
from .tensor import ShapeError, Tensor, as_tensor, custom_op, matmul, softmax_rows, transpose

__all__ = [
    "AttentionHeadConfig",
    "BandedWeights",
    "build_pattern",
    "dense_attention_reference",
    "sparse_attention",
    "sparse_attention_forward",
    "sparse_attention_weights",
]


class AttentionHeadConfig:
    def __init__(self, d_model, heads):
        if d_model < 1 or heads < 1 or d_model % heads:
            raise ValueError(f"heads ({heads}) must divide d_model ({d_model})")
        self.d_model = d_model
        self.heads = heads
        self.d_k = d_model // heads


class BandedWeights:
    """Attention weights kept in banded form; logically an n x n matrix.

    ``band[i, c]`` is the weight of key ``cols[i, c]`` for non-global rows;
    ``global_rows[g]`` is the full row of query ``pattern.globals[g]``.
    """

    def __init__(self, pattern, band, global_rows, cols):
        self.pattern = pattern
        self.band = band
        self.global_rows = global_rows
        self.cols = cols

    @property
    def shape(self):
        return (self.pattern.n, self.pattern.n)

    @property
    def nbytes(self):
        return self.band.nbytes + self.global_rows.nbytes

    def row(self, i):
        """Return ``(key_indices, weights)`` for the non-zero support of row ``i``."""
        if self.pattern.is_global(i):
            g = self.pattern.globals.index(i)
            vals = self.global_rows[g]
            idx = np.nonzero(vals)[0]
            return idx, vals[idx]
        sel = self.cols[i] >= 0
        idx, vals = self.cols[i][sel], self.band[i][sel]
        order = np.argsort(idx)
        return idx[order], vals[order]

    def iter_rows(self):
        for i in range(self.pattern.n):
            yield (i, *self.row(i))

    def row_sums(self):
        sums = self.band.astype(np.float64).sum(axis=1)
        for g, i in enumerate(self.pattern.globals):
            sums[i] = self.global_rows[g].astype(np.float64).sum()
        return sums

    def to_dense(self):
        n = self.pattern.n
        dense = np.zeros((n, n), dtype=self.band.dtype)
        for i, idx, vals in self.iter_rows():
            dense[i, idx] = vals
        return dense


def _as3d(t):
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    return arr.reshape((-1,) + arr.shape[-2:])


def _key_valid(key_mask, batch_shape, n):
    if key_mask is None:
        return np.ones((int(np.prod(batch_shape, dtype=np.int64)), n), dtype=np.uint8)
    km = np.broadcast_to(np.asarray(key_mask, dtype=bool), tuple(batch_shape) + (n,))
    return np.ascontiguousarray(km.reshape(-1, n), dtype=np.uint8)


def _check(Q, K, V, pattern):
    if Q.shape != K.shape or (V is not None and V.shape[:-1] != K.shape[:-1]):
        raise ShapeError(
            f"sparse attention: shapes disagree Q{Q.shape} K{K.shape}" + (f" V{V.shape}" if V is not None else "")
        )
    if Q.shape[-2] != pattern.n:
        raise ShapeError(f"sparse attention: sequence length {Q.shape[-2]} != pattern length {pattern.n}")


def sparse_attention_weights(Q, K, pattern, key_mask=None, backend=None):
    """Restricted softmax of Q K^T / sqrt(d_k) over each N_i.

    Q and K are ``[n, d_k]``. Returns :class:`BandedWeights`.
    """
    Q, K = as_tensor(Q), as_tensor(K)
    _check(Q, K, None, pattern)
    if Q.ndim != 2:
        raise ShapeError("sparse_attention_weights takes 2-D [n, d_k] inputs")
    impl = kernels.get_backend(backend)
    cols, grows = pattern.band_columns(), pattern.global_rows()
    q, k = _as3d(Q), _as3d(K)
    pb, pg = impl.band_probs(q, k, cols, grows, _key_valid(key_mask, (1,), pattern.n), 1.0 / math.sqrt(q.shape[-1]))
    return BandedWeights(pattern, pb[0], pg[0], cols)


def sparse_attention(Q, K, V, pattern, key_mask=None, backend=None):
    """Differentiable banded attention over the last two axes.

    ``Q``, ``K``, ``V`` are ``[..., n, d_k]``; leading axes (batch, heads)
    are flattened into the kernel batch. ``key_mask`` marks real keys and
    broadcasts against the leading axes plus ``n``; a query always keeps
    itself as a key so no row becomes empty.
    """
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    _check(Q, K, V, pattern)
    impl = kernels.get_backend(backend)
    lead = Q.shape[:-2]
    n, d = Q.shape[-2], Q.shape[-1]
    dtype = Q.data.dtype
    q, k, v = (np.ascontiguousarray(_as3d(t), dtype=dtype) for t in (Q, K, V))
    cols, grows = pattern.band_columns(), pattern.global_rows()
    key_valid = _key_valid(key_mask, lead, n)
    scale = 1.0 / math.sqrt(d)
    pb, pg = impl.band_probs(q, k, cols, grows, key_valid, scale)
    out = impl.band_apply(pb, pg, v, cols, grows).reshape(V.shape)

    def bw(g):
        g3 = np.ascontiguousarray(g.reshape(-1, n, V.shape[-1]), dtype=dtype)
        dq, dk, dv = impl.band_backward(q, k, v, pb, pg, g3, cols, grows, scale)
        return dq.reshape(Q.shape), dk.reshape(K.shape), dv.reshape(V.shape)

    return custom_op("sparse_attention", out, (Q, K, V), bw)


def sparse_attention_forward(Q, K, V, pattern, key_mask=None, backend=None):
    """Output rows ``sum_j A(i, j) V_j`` with ``A`` supported on the pattern."""
    return sparse_attention(Q, K, V, pattern, key_mask=key_mask, backend=backend)


def dense_attention_reference(Q, K, V, mask):
    """Full n x n masked softmax attention. O(n^2); for tests and benchmarks."""
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2]:
        raise ShapeError(f"dense attention: shapes disagree Q{Q.shape} K{K.shape} V{V.shape}")
    mask = np.asarray(mask, dtype=bool)
    scores = matmul(Q, transpose(K, _swap_last(K.ndim))) * (1.0 / math.sqrt(Q.shape[-1]))
    return matmul(softmax_rows(scores, mask), V)


def _swap_last(ndim):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)
