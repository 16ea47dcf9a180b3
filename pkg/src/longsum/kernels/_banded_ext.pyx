# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled banded attention kernels.

Same contract as ``_banded_numpy``: arrays are C-contiguous
``(batch, n, d)``; ``cols`` is the ``(n, band_width)`` column map with -1
for empty slots and ``grows`` lists the global query rows, which are
evaluated over the whole sequence. Accumulation is in double precision.
"""

import numpy as np
from cython cimport floating
from libc.math cimport exp, INFINITY


cdef inline bint _key_ok(const unsigned char[:, ::1] key_valid, Py_ssize_t b,
                         Py_ssize_t i, Py_ssize_t j) noexcept nogil:
    return key_valid[b, j] != 0 or i == j


def band_probs(floating[:, :, ::1] q, floating[:, :, ::1] k,
               const long long[:, ::1] cols, const long long[::1] grows,
               const unsigned char[:, ::1] key_valid, double scale):
    cdef Py_ssize_t B = q.shape[0], n = q.shape[1], d = q.shape[2]
    cdef Py_ssize_t C = cols.shape[1], G = grows.shape[0]
    dtype = np.float32 if floating is float else np.float64
    pb_arr = np.zeros((B, n, C), dtype=dtype)
    pg_arr = np.zeros((B, G, n), dtype=dtype)
    cdef floating[:, :, ::1] pb = pb_arr
    cdef floating[:, :, ::1] pg = pg_arr
    cdef double[::1] buf = np.empty(max(C, n), dtype=np.float64)
    cdef Py_ssize_t b, i, j, c, t, gi
    cdef double s, m, tot

    with nogil:
        for b in range(B):
            for i in range(n):
                m = -INFINITY
                for c in range(C):
                    j = cols[i, c]
                    if j < 0 or not _key_ok(key_valid, b, i, j):
                        buf[c] = -INFINITY
                        continue
                    s = 0.0
                    for t in range(d):
                        s = s + <double>q[b, i, t] * <double>k[b, j, t]
                    s = s * scale
                    buf[c] = s
                    if s > m:
                        m = s
                if m == -INFINITY:
                    continue
                tot = 0.0
                for c in range(C):
                    if buf[c] != -INFINITY:
                        buf[c] = exp(buf[c] - m)
                        tot = tot + buf[c]
                    else:
                        buf[c] = 0.0
                for c in range(C):
                    pb[b, i, c] = <floating>(buf[c] / tot)

            for gi in range(G):
                i = grows[gi]
                m = -INFINITY
                for j in range(n):
                    if not _key_ok(key_valid, b, i, j):
                        buf[j] = -INFINITY
                        continue
                    s = 0.0
                    for t in range(d):
                        s = s + <double>q[b, i, t] * <double>k[b, j, t]
                    s = s * scale
                    buf[j] = s
                    if s > m:
                        m = s
                tot = 0.0
                for j in range(n):
                    if buf[j] != -INFINITY:
                        buf[j] = exp(buf[j] - m)
                        tot = tot + buf[j]
                    else:
                        buf[j] = 0.0
                for j in range(n):
                    pg[b, gi, j] = <floating>(buf[j] / tot)
    return pb_arr, pg_arr


def band_apply(floating[:, :, ::1] pb, floating[:, :, ::1] pg, floating[:, :, ::1] v,
               const long long[:, ::1] cols, const long long[::1] grows):
    cdef Py_ssize_t B = v.shape[0], n = v.shape[1], d = v.shape[2]
    cdef Py_ssize_t C = cols.shape[1], G = grows.shape[0]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((B, n, d), dtype=dtype)
    cdef floating[:, :, ::1] out = out_arr
    cdef double[::1] acc = np.empty(d, dtype=np.float64)
    cdef Py_ssize_t b, i, j, c, t, gi
    cdef double p

    with nogil:
        for b in range(B):
            for i in range(n):
                for t in range(d):
                    acc[t] = 0.0
                for c in range(C):
                    j = cols[i, c]
                    p = pb[b, i, c]
                    if j < 0 or p == 0.0:
                        continue
                    for t in range(d):
                        acc[t] = acc[t] + p * <double>v[b, j, t]
                for t in range(d):
                    out[b, i, t] = <floating>acc[t]
            for gi in range(G):
                i = grows[gi]
                for t in range(d):
                    acc[t] = 0.0
                for j in range(n):
                    p = pg[b, gi, j]
                    if p == 0.0:
                        continue
                    for t in range(d):
                        acc[t] = acc[t] + p * <double>v[b, j, t]
                for t in range(d):
                    out[b, i, t] = <floating>acc[t]
    return out_arr


cdef inline void _row_backward(floating[:, :, ::1] q, floating[:, :, ::1] k,
                               floating[:, :, ::1] v, floating[:, :, ::1] dout,
                               double[:, :, ::1] dq, double[:, :, ::1] dk, double[:, :, ::1] dv,
                               double[::1] dp, Py_ssize_t b, Py_ssize_t i, Py_ssize_t j,
                               Py_ssize_t slot, double p) noexcept nogil:
    # first pass: dp and dv for one (row, key) pair
    cdef Py_ssize_t t
    cdef Py_ssize_t d = q.shape[2]
    cdef double s = 0.0
    for t in range(d):
        s = s + <double>dout[b, i, t] * <double>v[b, j, t]
        dv[b, j, t] = dv[b, j, t] + p * <double>dout[b, i, t]
    dp[slot] = s


cdef inline void _row_grad_qk(floating[:, :, ::1] q, floating[:, :, ::1] k,
                              double[:, :, ::1] dq, double[:, :, ::1] dk,
                              Py_ssize_t b, Py_ssize_t i, Py_ssize_t j, double ds) noexcept nogil:
    cdef Py_ssize_t t
    cdef Py_ssize_t d = q.shape[2]
    for t in range(d):
        dq[b, i, t] = dq[b, i, t] + ds * <double>k[b, j, t]
        dk[b, j, t] = dk[b, j, t] + ds * <double>q[b, i, t]


def band_backward(floating[:, :, ::1] q, floating[:, :, ::1] k, floating[:, :, ::1] v,
                  floating[:, :, ::1] pb, floating[:, :, ::1] pg, floating[:, :, ::1] dout,
                  const long long[:, ::1] cols, const long long[::1] grows, double scale):
    cdef Py_ssize_t B = q.shape[0], n = q.shape[1], d = q.shape[2]
    cdef Py_ssize_t C = cols.shape[1], G = grows.shape[0]
    dq_arr = np.zeros((B, n, d), dtype=np.float64)
    dk_arr = np.zeros((B, n, d), dtype=np.float64)
    dv_arr = np.zeros((B, n, d), dtype=np.float64)
    cdef double[:, :, ::1] dq = dq_arr
    cdef double[:, :, ::1] dk = dk_arr
    cdef double[:, :, ::1] dv = dv_arr
    cdef double[::1] dp = np.empty(max(C, n), dtype=np.float64)
    cdef Py_ssize_t b, i, j, c, gi
    cdef double p, acc

    with nogil:
        for b in range(B):
            for i in range(n):
                acc = 0.0
                for c in range(C):
                    j = cols[i, c]
                    p = pb[b, i, c]
                    if j < 0 or p == 0.0:
                        dp[c] = 0.0
                        continue
                    _row_backward(q, k, v, dout, dq, dk, dv, dp, b, i, j, c, p)
                    acc = acc + p * dp[c]
                for c in range(C):
                    j = cols[i, c]
                    p = pb[b, i, c]
                    if j < 0 or p == 0.0:
                        continue
                    _row_grad_qk(q, k, dq, dk, b, i, j, p * (dp[c] - acc) * scale)
            for gi in range(G):
                i = grows[gi]
                acc = 0.0
                for j in range(n):
                    p = pg[b, gi, j]
                    if p == 0.0:
                        dp[j] = 0.0
                        continue
                    _row_backward(q, k, v, dout, dq, dk, dv, dp, b, i, j, j, p)
                    acc = acc + p * dp[j]
                for j in range(n):
                    p = pg[b, gi, j]
                    if p == 0.0:
                        continue
                    _row_grad_qk(q, k, dq, dk, b, i, j, p * (dp[j] - acc) * scale)

    dtype = np.float32 if floating is float else np.float64
    return dq_arr.astype(dtype), dk_arr.astype(dtype), dv_arr.astype(dtype)
