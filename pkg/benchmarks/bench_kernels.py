"""Compare the compiled kernels against the NumPy fallback.

    python benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import time

import numpy as np

from qatlab import _fallback, quant

try:
    from qatlab import _kernels
except ImportError:
    _kernels = None


def timeit(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    shapes = {"attn 128x128": (128, 128), "mlp 128x344": (128, 344), "mlp 344x128": (344, 128)}
    factors = quant.mse_factors(101)
    backends = [("numpy", _fallback)] + ([("compiled", _kernels)] if _kernels else [])
    print(f"{'kernel':<12}{'shape':<16}" + "".join(f"{n:>12}" for n, _ in backends) + f"{'speedup':>10}")
    for label, shape in shapes.items():
        w = rng.normal(0, 0.02, size=shape).astype(np.float32)
        base = np.abs(w).max(0).astype(np.float64) / 7
        s = base.astype(np.float32)
        z = np.zeros(shape[1], np.float32)
        for kname, call in (
            ("qdq_mask", lambda m: m.qdq_mask(w, s, z, -8.0, 7.0)),
            ("mse_search", lambda m: m.mse_search(w, base, z, -8.0, 7.0, factors)),
        ):
            times = [timeit(lambda m=m: call(m), args.repeat) for _, m in backends]
            speed = f"{times[0] / times[-1]:>9.1f}x" if len(times) > 1 else ""
            print(f"{kname:<12}{label:<16}" + "".join(f"{t * 1e3:>10.3f}ms" for t in times) + speed)


if __name__ == "__main__":
    main()
