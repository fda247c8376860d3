"""Benchmark the numba kernel backend against the pure-numpy fallback.

Runs every hot kernel (conv2d forward/input-grad/weight-grad, bilinear
resize, RoI extraction) over a few operating-point shapes and prints a
table of per-call times plus the speedup of numba over numpy. The first
numba call per kernel compiles (cached on disk); timings exclude it.

Usage:
    python benchmarks/bench_kernels.py [--csv out.csv] [--repeats 9]
"""

import argparse
import csv
import sys
import time

import numpy as np

from poserefine.kernels import numpy_backend

try:
    from poserefine.kernels import numba_backend
except ImportError:  # pragma: no cover
    numba_backend = None

# (label, channels, height, width) operating points from the pipeline
SHAPES = [
    ("fpn-p2", 32, 24, 24),
    ("head-roi", 32, 14, 14),
    ("stem", 16, 48, 48),
]


def timeit(fn, args, inner=20, repeats=9):
    fn(*args)  # warm up / compile
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn(*args)
        best = min(best, (time.perf_counter() - t0) / inner)
    return best * 1e3  # ms


def kernel_cases(c, h, w, rng):
    x = rng.normal(size=(c, h, w))
    wts = rng.normal(size=(c, c, 3, 3))
    bias = np.zeros(c)
    g = rng.normal(size=(c, h, w))
    g14 = rng.normal(size=(c, 14, 14))
    fbox = (0.3, 0.7, w - 1.4, h - 1.2)
    return [
        ("conv2d_forward", (x, wts, bias, 1, 1)),
        ("conv2d_input_grad", (g, wts, 1, 1, h, w)),
        ("conv2d_weight_grad", (g, x, 1, 1, 3)),
        ("upsample_forward", (x, 2)),
        ("upsample_input_grad", (rng.normal(size=(c, 2 * h, 2 * w)), 2, h, w)),
        ("roi_align_forward", (x, *fbox, 14, 14, 2)),
        ("roi_align_input_grad", (g14, *fbox, h, w, 2)),
    ]


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--csv", help="also write results as CSV")
    parser.add_argument("--repeats", type=int, default=9)
    args = parser.parse_args(argv)
    if numba_backend is None:
        print("numba is not importable; nothing to compare", file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    rows = []
    print(f"{'shape':>9} {'kernel':<22} {'numba ms':>10} {'numpy ms':>10} "
          f"{'speedup':>8}")
    for label, c, h, w in SHAPES:
        for name, call_args in kernel_cases(c, h, w, rng):
            t_nb = timeit(getattr(numba_backend, name), call_args,
                          repeats=args.repeats)
            t_np = timeit(getattr(numpy_backend, name), call_args,
                          repeats=args.repeats)
            rows.append({"shape": label, "kernel": name,
                         "numba_ms": f"{t_nb:.4f}",
                         "numpy_ms": f"{t_np:.4f}",
                         "speedup": f"{t_np / t_nb:.2f}"})
            print(f"{label:>9} {name:<22} {t_nb:>10.4f} {t_np:>10.4f} "
                  f"{t_np / t_nb:>8.2f}x")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
        print(f"wrote {args.csv}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
