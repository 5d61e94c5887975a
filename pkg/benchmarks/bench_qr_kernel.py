"""Compare the compiled and numpy interior point kernels.

Run ``python benchmarks/bench_qr_kernel.py``. Each row times one
check-loss solve of the size met in the grid search (n observations,
m columns) and reports the largest coefficient difference between the
two kernels.
"""
import argparse
import time

import numpy as np

from plvcsar.qr._kernel import KERNELS

SIZES = [(100, 10), (100, 17), (200, 17), (500, 21), (800, 21)]


def _time(fn, X, y, tau, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn(X, y, tau)
        best = min(best, time.perf_counter() - t0)
    return best, out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--tau", type=float, default=0.5)
    args = ap.parse_args()
    if "cython" not in KERNELS:
        print("compiled kernel not built; only the numpy kernel is available")
    rng = np.random.default_rng(7)
    print(f"{'n':>5} {'m':>4} {'python ms':>10} {'cython ms':>10} {'speedup':>8} {'max |diff|':>11}")
    for n, m in SIZES:
        X = np.column_stack([np.ones(n), rng.standard_normal((n, m - 1))])
        y = X @ rng.standard_normal(m) + rng.standard_normal(n)
        tp, (cp, *_) = _time(KERNELS["python"], X, y, args.tau, args.repeat)
        if "cython" in KERNELS:
            tc, (cc, *_) = _time(KERNELS["cython"], X, y, args.tau, args.repeat)
            diff = float(np.max(np.abs(np.asarray(cc) - cp)))
            print(f"{n:>5} {m:>4} {1e3 * tp:>10.3f} {1e3 * tc:>10.3f} {tp / tc:>8.1f} {diff:>11.2e}")
        else:
            print(f"{n:>5} {m:>4} {1e3 * tp:>10.3f} {'-':>10} {'-':>8} {'-':>11}")


if __name__ == "__main__":
    main()
