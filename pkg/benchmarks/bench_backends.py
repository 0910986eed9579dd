"""Time the numba kernels against the pure-numpy fallback.

Runs each hot kernel (cluster attention forward/backward, masked segment
mean, cosine assignment) on both backends and prints best-of-N wall times
with the speedup. The first numba call per kernel compiles; a warmup call
keeps that out of the timings.

Usage: python benchmarks/bench_backends.py [--repeats 7] [--quick]
"""

import argparse
import time

import numpy as np

import sliceseq.backend as backend
import sliceseq.kernels as kernels


def best_of(fn, repeats: int) -> float:
    fn()  # warmup: numba compilation, cache touch
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def attention_case(rng, b, n, m, heads, K):
    q, k, v = (rng.standard_normal((b, n, m)).astype(np.float32) for _ in range(3))
    cid = rng.integers(0, K, size=(b, n)).astype(np.int64)
    mask = rng.random((b, n)) < 0.9
    mask[:, 0] = True
    cid[~mask] = K

    def fwd():
        kernels.cluster_attention_forward(q, k, v, cid, mask, K, heads)

    out, saved = kernels.cluster_attention_forward(q, k, v, cid, mask, K, heads)
    dout = rng.standard_normal(out.shape).astype(np.float32)

    def bwd():
        kernels.cluster_attention_backward(dout, k, v, cid, mask, saved, heads)

    return fwd, bwd


def segment_case(rng, b, n, K):
    values = rng.standard_normal((b, n)).astype(np.float32)
    cid = rng.integers(0, K, size=(b, n)).astype(np.int64)
    mask = rng.random((b, n)) < 0.9
    mask[:, 0] = True
    cid[~mask] = K
    return lambda: kernels.segment_mean_forward(values, cid, mask, K)


def assign_case(rng, n, K, dim):
    x = rng.standard_normal((n, dim))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    c = rng.standard_normal((K, dim))
    c /= np.linalg.norm(c, axis=1, keepdims=True)
    return lambda: kernels.assign_cosine(x, c)


def build_cases(quick: bool):
    rng = np.random.default_rng(0)
    b, n, m, heads, K = (4, 64, 64, 4, 16) if quick else (8, 256, 128, 8, 32)
    fwd, bwd = attention_case(rng, b, n, m, heads, K)
    cases = [
        (f"attention fwd  B={b} N={n} M={m} H={heads} K={K}", fwd),
        (f"attention bwd  B={b} N={n} M={m} H={heads} K={K}", bwd),
        (f"segment mean   B={b * 8} N={n} K={K}", segment_case(rng, b * 8, n, K)),
        (f"assign cosine  n={n * 64} K={K} d={m}", assign_case(rng, n * 64, K, m)),
    ]
    return cases


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=7, help="timed repeats per kernel (best kept)")
    ap.add_argument("--quick", action="store_true", help="smaller problem sizes")
    args = ap.parse_args()

    if not backend.NUMBA_AVAILABLE:
        print("numba is not importable; nothing to compare (numpy fallback is active)")
        return 1

    results = {}
    for name in ("numpy", "numba"):
        backend.set_backend(name)
        for label, fn in build_cases(args.quick):
            results.setdefault(label, {})[name] = best_of(fn, args.repeats)
    backend.set_backend(None)

    width = max(len(label) for label in results)
    print(f"{'kernel'.ljust(width)}  {'numpy':>10}  {'numba':>10}  {'speedup':>7}")
    for label, times in results.items():
        ratio = times["numpy"] / times["numba"]
        print(
            f"{label.ljust(width)}  {times['numpy'] * 1e3:>8.3f}ms  "
            f"{times['numba'] * 1e3:>8.3f}ms  {ratio:>6.1f}x"
        )
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
