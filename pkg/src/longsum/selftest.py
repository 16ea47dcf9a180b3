"""Quick built-in checks run by ``longsum selftest``."""

import numpy as np

from . import kernels
from .attention import dense_attention_reference, sparse_attention, sparse_attention_weights
from .oracles import rel_err, rouge_l_bruteforce, rouge_n_bruteforce
from .pattern import build_pattern
from .tensor import Tensor, finite_difference_grad, precision
from .training import clip_gradient


def _random_pattern(rng, n):
    w = int(rng.integers(0, n + 1))
    g = rng.choice(n, size=int(rng.integers(0, min(n, 4) + 1)), replace=False)
    return build_pattern(n, w, g)


def check_pattern_examples(rng):
    p = build_pattern(5, 1, [0])
    q = build_pattern(6, 2, [0, 5])
    ok = p.neighbors(2) == [0, 1, 2, 3] and q.neighbors(3) == [0, 1, 2, 3, 4, 5]
    ok &= all(build_pattern(4, 0, []).neighbors(i) == [i] for i in range(4))
    return ok, "N_i membership on fixed cases"


def check_oracle_equivalence(rng, cases=40):
    worst = 0.0
    for _ in range(cases):
        n = int(rng.integers(1, 33))
        p = _random_pattern(rng, n)
        Q, K, V = (rng.standard_normal((n, 8)).astype(np.float32) for _ in range(3))
        for be in kernels.BACKENDS:
            s = sparse_attention(Q, K, V, p, backend=be).data
            d = dense_attention_reference(Q, K, V, p.to_mask()).data
            worst = max(worst, float(np.abs(s - d).max()))
    return worst <= 1e-5, f"max |sparse - dense| = {worst:.2e} over {cases} cases"


def check_row_support(rng, cases=100):
    worst = 0.0
    support_ok = True
    for _ in range(cases):
        n = int(rng.integers(1, 33))
        p = _random_pattern(rng, n)
        W = sparse_attention_weights(rng.standard_normal((n, 4)), rng.standard_normal((n, 4)), p)
        dense = W.to_dense()
        worst = max(worst, float(np.abs(W.row_sums() - 1).max()))
        support_ok &= bool(np.all(dense[~p.to_mask()] == 0))
    return support_ok and worst <= 1e-6, f"max |row sum - 1| = {worst:.2e}"


def check_sparse_gradient(rng):
    n = 8
    p = build_pattern(n, 1, [0])
    worst = 0.0
    with precision(np.float64):
        arrs = [rng.standard_normal((n, 4)) for _ in range(3)]
        weight = rng.standard_normal((n, 4))
        for slot in range(3):
            def f(x, slot=slot):
                args = [Tensor(a) for a in arrs]
                args[slot] = x
                return (sparse_attention(*args, p) * Tensor(weight)).sum()

            x = Tensor(arrs[slot], requires_grad=True)
            args = [Tensor(a) for a in arrs]
            args[slot] = x
            (sparse_attention(*args, p) * Tensor(weight)).sum().backward()
            fd = finite_difference_grad(f, Tensor(arrs[slot]), eps=1e-3).data
            worst = max(worst, float(rel_err(x.grad, fd, floor=1e-3).max()))
    return worst <= 1e-4, f"max rel. err vs finite differences = {worst:.2e}"


def check_backends_agree(rng):
    if len(kernels.BACKENDS) < 2:
        return True, "only the numpy kernel is built"
    p = build_pattern(64, 4, [0, 31])
    Q, K, V = (rng.standard_normal((2, 64, 16)).astype(np.float32) for _ in range(3))
    a = sparse_attention(Q, K, V, p, backend="native").data
    b = sparse_attention(Q, K, V, p, backend="python").data
    diff = float(np.abs(a - b).max())
    return diff <= 1e-6, f"max |native - python| = {diff:.2e}"


def check_clipping(rng, cases=200):
    ok = True
    for _ in range(cases):
        g = rng.standard_normal(int(rng.integers(1, 50))) * rng.uniform(0.01, 10)
        C = float(rng.uniform(0.1, 5))
        c1 = clip_gradient(g, C)
        ok &= np.linalg.norm(c1) <= C + 1e-6 and np.array_equal(clip_gradient(c1, C), c1)
    return bool(ok), f"norm <= C and idempotent on {cases} tensors"


def check_rouge(rng, cases=300):
    from .evaluation import rouge_l, rouge_n

    ok = True
    for _ in range(cases):
        a = list(rng.integers(0, 5, size=int(rng.integers(0, 12))))
        b = list(rng.integers(0, 5, size=int(rng.integers(0, 12))))
        for n in (1, 2, 3):
            s = rouge_n(a, b, n)
            ok &= (s.precision, s.recall, s.f1) == rouge_n_bruteforce(a, b, n)
        s = rouge_l(a, b)
        ok &= (s.precision, s.recall, s.f1) == rouge_l_bruteforce(a, b)
    return bool(ok), f"exact match with brute force on {cases} pairs"


CHECKS = [
    ("pattern", check_pattern_examples),
    ("oracle-equivalence", check_oracle_equivalence),
    ("row-stochastic", check_row_support),
    ("sparse-gradient", check_sparse_gradient),
    ("kernel-backends", check_backends_agree),
    ("clipping", check_clipping),
    ("rouge-oracle", check_rouge),
]


def run_checks(seed=0):
    results = []
    for name, fn in CHECKS:
        rng = np.random.default_rng(seed)
        try:
            ok, detail = fn(rng)
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, bool(ok), detail))
    return results
