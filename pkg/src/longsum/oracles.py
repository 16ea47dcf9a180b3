"""Slow, independent reference computations used by ``selftest`` and the tests."""

import itertools
import math

import numpy as np

from .model import BOS, EOS, PAD


def rouge_n_bruteforce(candidate, reference, n):
    """Clipped overlap by explicit matching: each reference n-gram is used once."""
    cand = [tuple(candidate[i:i + n]) for i in range(len(candidate) - n + 1)]
    ref = [tuple(reference[i:i + n]) for i in range(len(reference) - n + 1)]
    unused = list(ref)
    overlap = 0
    for g in cand:
        if g in unused:
            unused.remove(g)
            overlap += 1
    return _prf(overlap, len(cand), len(ref))


def lcs_table(a, b):
    """Full O(|a| |b|) dynamic-programming table; returns the LCS length."""
    T = np.zeros((len(a) + 1, len(b) + 1), dtype=np.int64)
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            T[i, j] = T[i - 1, j - 1] + 1 if a[i - 1] == b[j - 1] else max(T[i - 1, j], T[i, j - 1])
    return int(T[-1, -1])


def rouge_l_bruteforce(candidate, reference):
    return _prf(lcs_table(candidate, reference), len(candidate), len(reference))


def _prf(overlap, n_cand, n_ref):
    if n_cand == 0 or n_ref == 0:
        return 0.0, 0.0, 0.0
    p, r = overlap / n_cand, overlap / n_ref
    return p, r, (0.0 if p + r == 0 else 2 * p * r / (p + r))


def exhaustive_best_sequence(model, H, max_len):
    """Highest log-probability output over every sequence of <= ``max_len`` tokens.

    PAD and BOS are never generated, so they are left out of the enumeration.

    A sequence ends at the first EOS or is cut at ``max_len`` tokens.
    Returns ``(tokens_without_specials, log_prob)``.
    """
    tokens = [t for t in range(model.config.vocab_size) if t not in (PAD, BOS)]
    best, best_lp = None, -math.inf
    for length in range(1, max_len + 1):
        for body in itertools.product(tokens, repeat=length):
            if EOS in body[:-1]:
                continue
            if length < max_len and body[-1] != EOS:
                continue
            lp, prefix = 0.0, [BOS]
            for tok in body:
                lp += float(model.step_log_probs(prefix, H)[tok])
                prefix.append(tok)
            if lp > best_lp:
                best, best_lp = list(body), lp
    out = best[:-1] if best and best[-1] == EOS else best
    return out, best_lp


def rel_err(a, b, floor=1e-6):
    """Elementwise |a - b| / max(|a|, |b|, floor)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
