"""Compiled kernels vs the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from gradpoison import _kernels_py

try:
    from gradpoison import _kernels
except ImportError:
    _kernels = None


def cases(rng):
    X = rng.standard_normal((142, 771))  # one MultiKrum step on the toy MLP
    Xc = rng.standard_normal((142, 20_000))
    img = rng.standard_normal((32, 3, 32, 32))
    cols = rng.standard_normal((32, 14 * 14, 3 * 5 * 5))
    return [
        ("pairwise_sq_dists 142x771", "pairwise_sq_dists", (X,)),
        ("pairwise_sq_dists 142x20000", "pairwise_sq_dists", (Xc,)),
        ("im2col 32x3x32x32 k5 s2", "im2col", (img, 5, 2)),
        ("col2im 32x3x32x32 k5 s2", "col2im", (cols, 3, 32, 32, 5, 2)),
    ]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    backends = [("python", _kernels_py)] + ([("cython", _kernels)] if _kernels is not None else [])
    if _kernels is None:
        print("compiled extension not built; timing the fallback only")
    print(f"{'kernel':32s}" + "".join(f"{name:>12s}" for name, _ in backends) + "     speedup")
    for label, fn, fargs in cases(rng):
        times = []
        for _, mod in backends:
            f = getattr(mod, fn)
            n = 3
            times.append(min(timeit.repeat(lambda: f(*fargs), number=n, repeat=args.repeat)) / n)
        ref = getattr(_kernels_py, fn)(*fargs)
        if _kernels is not None:
            err = float(np.max(np.abs(getattr(_kernels, fn)(*fargs) - ref)))
        row = f"{label:32s}" + "".join(f"{t * 1e3:10.3f}ms" for t in times)
        if len(times) == 2:
            row += f"  {times[0] / times[1]:8.2f}x  (max diff {err:.1e})"
        print(row)


if __name__ == "__main__":
    main()
