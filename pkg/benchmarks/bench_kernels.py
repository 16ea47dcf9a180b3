"""Compiled vs numpy banded-attention kernels, forward and backward.

    python3 benchmarks/bench_kernels.py [--ns 256,512,1024,2048] [--window 16] [--d 64]
"""

import argparse
import time

import numpy as np

from longsum import kernels
from longsum.attention import sparse_attention
from longsum.pattern import build_pattern
from longsum.tensor import Tensor, mul, no_grad, tsum


def best_of(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def time_backend(backend, n, w, d, heads, repeats):
    rng = np.random.default_rng(0)
    p = build_pattern(n, w, [0])
    Q, K, V = (rng.standard_normal((heads, n, d)).astype(np.float32) for _ in range(3))
    probe = Tensor(rng.standard_normal((heads, n, d)))

    def forward():
        with no_grad():
            sparse_attention(Q, K, V, p, backend=backend)

    def forward_backward():
        q = Tensor(Q, requires_grad=True)
        tsum(mul(sparse_attention(q, Tensor(K), Tensor(V), p, backend=backend), probe)).backward()

    return best_of(forward, repeats), best_of(forward_backward, repeats)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--ns", default="256,512,1024,2048", help="comma-separated sequence lengths")
    ap.add_argument("--window", type=int, default=16, help="window half-width w")
    ap.add_argument("--d", type=int, default=64, help="head dimension")
    ap.add_argument("--heads", type=int, default=4, help="number of heads")
    ap.add_argument("--repeats", type=int, default=5, help="timing repeats (best is kept)")
    args = ap.parse_args()

    backends = sorted(kernels.BACKENDS)
    print(f"backends available: {', '.join(backends)} (default: {kernels.BACKEND})")
    print(f"{'n':>6} {'backend':>8} {'fwd ms':>10} {'fwd+bwd ms':>12}")
    results = {}
    for n in (int(x) for x in args.ns.split(",")):
        for be in backends:
            fwd, both = time_backend(be, n, args.window, args.d, args.heads, args.repeats)
            results[be, n] = fwd
            print(f"{n:>6} {be:>8} {fwd * 1e3:>10.3f} {both * 1e3:>12.3f}")
    if "native" in backends and "python" in backends:
        for n in sorted({n for _, n in results}):
            print(f"speedup at n={n}: {results['python', n] / results['native', n]:.2f}x forward")


if __name__ == "__main__":
    main()
