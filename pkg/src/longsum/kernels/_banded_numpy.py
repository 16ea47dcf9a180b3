"""Pure numpy banded attention kernels.

The band is walked one diagonal offset at a time, so the work is
proportional to ``n * band_width`` and no n x n array is built.
"""

import numpy as np


def _split(cols, grows):
    n, c = cols.shape
    ng = len(grows)
    nwin = c - ng
    w = (nwin - 1) // 2
    return n, w, nwin


def _key_ok(cols, key_valid):
    n = cols.shape[0]
    safe = np.where(cols >= 0, cols, 0)
    ok = key_valid[:, safe].astype(bool) | (safe == np.arange(n)[:, None])[None]
    return ok & (cols >= 0)[None]


def _masked_softmax(s, valid):
    """Row softmax over ``valid`` entries, in place on float64 ``s``; empty rows give zeros."""
    s[~valid] = -np.inf
    m = s.max(axis=-1, keepdims=True)
    m[~np.isfinite(m)] = 0.0
    s -= m
    np.exp(s, out=s)
    tot = s.sum(axis=-1, keepdims=True)
    tot[tot == 0] = 1.0
    s /= tot
    return s


def band_probs(q, k, cols, grows, key_valid, scale):
    B, n, d = q.shape
    _, w, nwin = _split(cols, grows)
    q64, k64 = q.astype(np.float64), k.astype(np.float64)
    s = np.zeros((B, n, cols.shape[1]))
    for c in range(nwin):
        o = c - w
        lo, hi = max(0, -o), min(n, n - o)
        if lo < hi:
            s[:, lo:hi, c] = np.einsum("bnd,bnd->bn", q64[:, lo:hi], k64[:, lo + o:hi + o])
    if len(grows):
        s[:, :, nwin:] = q64 @ k64[:, grows].transpose(0, 2, 1)
    s *= scale
    pb = _masked_softmax(s, _key_ok(cols, key_valid))

    if len(grows):
        sg = q64[:, grows] @ k64.transpose(0, 2, 1) * scale
        vg = key_valid.astype(bool)[:, None, :] | (np.arange(n)[None, :] == grows[:, None])[None]
        pg = _masked_softmax(sg, vg)
    else:
        pg = np.zeros((B, 0, n))
    return pb.astype(q.dtype), pg.astype(q.dtype)


def band_apply(pb, pg, v, cols, grows):
    B, n, d = v.shape
    _, w, nwin = _split(cols, grows)
    p64, v64 = pb.astype(np.float64), v.astype(np.float64)
    out = np.zeros((B, n, d))
    for c in range(nwin):
        o = c - w
        lo, hi = max(0, -o), min(n, n - o)
        if lo < hi:
            out[:, lo:hi] += p64[:, lo:hi, c, None] * v64[:, lo + o:hi + o]
    if len(grows):
        out += p64[:, :, nwin:] @ v64[:, grows]
        out[:, grows] = pg.astype(np.float64) @ v64
    return out.astype(v.dtype)


def band_backward(q, k, v, pb, pg, dout, cols, grows, scale):
    B, n, d = q.shape
    _, w, nwin = _split(cols, grows)
    q64, k64, v64 = (a.astype(np.float64) for a in (q, k, v))
    p = pb.astype(np.float64)
    g = dout.astype(np.float64)
    dq = np.zeros_like(q64)
    dk = np.zeros_like(k64)
    dv = np.zeros_like(v64)

    dp = np.zeros_like(p)
    for c in range(nwin):
        o = c - w
        lo, hi = max(0, -o), min(n, n - o)
        if lo < hi:
            dp[:, lo:hi, c] = np.einsum("bnd,bnd->bn", g[:, lo:hi], v64[:, lo + o:hi + o])
    if len(grows):
        dp[:, :, nwin:] = g @ v64[:, grows].transpose(0, 2, 1)
    ds = p * (dp - (p * dp).sum(axis=-1, keepdims=True)) * scale

    for c in range(nwin):
        o = c - w
        lo, hi = max(0, -o), min(n, n - o)
        if lo < hi:
            dq[:, lo:hi] += ds[:, lo:hi, c, None] * k64[:, lo + o:hi + o]
            dk[:, lo + o:hi + o] += ds[:, lo:hi, c, None] * q64[:, lo:hi]
            dv[:, lo + o:hi + o] += p[:, lo:hi, c, None] * g[:, lo:hi]
    if len(grows):
        dsg = ds[:, :, nwin:]
        pgc = p[:, :, nwin:]
        dq += dsg @ k64[:, grows]
        dk[:, grows] += dsg.transpose(0, 2, 1) @ q64
        dv[:, grows] += pgc.transpose(0, 2, 1) @ g

        # dense global rows
        pr = pg.astype(np.float64)
        gr = g[:, grows]
        dpr = gr @ v64.transpose(0, 2, 1)
        dsr = pr * (dpr - (pr * dpr).sum(axis=-1, keepdims=True)) * scale
        dq[:, grows] += dsr @ k64
        dk += dsr.transpose(0, 2, 1) @ q64[:, grows]
        dv += pr.transpose(0, 2, 1) @ gr
    return dq.astype(q.dtype), dk.astype(k.dtype), dv.astype(v.dtype)
