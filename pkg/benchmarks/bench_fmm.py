"""Wall-clock comparison of the compiled and pure-Python fast-marching kernels.

Usage::

    python benchmarks/bench_fmm.py --sizes 64 128 256 --repeat 3
"""

import argparse
import time

import numpy as np

from latentpinn import fmm, grf


def _best_of(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[64, 128, 256])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    src = fmm.SourceSpec()
    print(f"backends available: {', '.join(fmm.BACKENDS)}")
    print(f"{'n':>6} {'python [s]':>12} {'cython [s]':>12} {'speedup':>9} {'identical':>10}")
    for n in args.sizes:
        v = grf.sample_velocity(grf.GrfParams(n=n, seed=0), 0)
        tp, ref = _best_of(lambda: fmm.solve_eikonal(v, src, backend="python"), args.repeat)
        if "cython" in fmm.BACKENDS:
            tc, out = _best_of(lambda: fmm.solve_eikonal(v, src, backend="cython"), args.repeat)
            same = bool(np.array_equal(ref.values, out.values))
            print(f"{n:>6} {tp:>12.4f} {tc:>12.4f} {tp / tc:>8.1f}x {str(same):>10}")
        else:
            print(f"{n:>6} {tp:>12.4f} {'n/a':>12} {'n/a':>9} {'n/a':>10}")


if __name__ == "__main__":
    main()
