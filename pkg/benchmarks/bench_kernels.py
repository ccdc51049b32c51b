"""Time the compiled and pure-Python kernels on the annulus instance.

Usage::

    python benchmarks/bench_kernels.py --N 500 --gammas 10,1000,10000 --repeat 3
"""

import argparse
import sys
import time

import numpy as np

from sweepopt import _pykernels, backend
from sweepopt.instance import builtin


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench(kernels, model, grid, x0, u, gamma, repeat):
    states, subs, status = kernels.forward(model, grid, x0, u, gamma)
    if status != 0:
        raise RuntimeError(f"forward failed with status {status} at gamma={gamma}")
    bar = np.array([0.3, -1.0])
    return {
        "forward": best_of(lambda: kernels.forward(model, grid, x0, u, gamma), repeat),
        "vjp": best_of(lambda: kernels.vjp(model, grid, u, gamma, subs, states, bar), repeat),
        "adjoint": best_of(lambda: kernels.adjoint(model, grid, u, gamma, subs, states, bar), repeat),
        "substeps": int(subs.sum()),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--N", type=int, default=500, help="grid cells")
    ap.add_argument("--gammas", default="10,1000,10000", help="comma-separated penalty parameters")
    ap.add_argument("--repeat", type=int, default=3, help="timing repetitions (best is reported)")
    args = ap.parse_args(argv)
    if not backend.HAVE_COMPILED:
        print("compiled kernels are not built; run `python setup.py build_ext --inplace`", file=sys.stderr)
        return 1
    from sweepopt import _ckernels

    inst = builtin("annulus_example")
    model = inst.rhs_model()
    grid = inst.grid(args.N)
    u = grid[:, None].copy()
    print(f"{'gamma':>8} {'kernel':>8} {'substeps':>9} {'python [s]':>11} {'compiled [s]':>13} {'speedup':>8}")
    for gamma in (float(g) for g in args.gammas.split(",")):
        x0 = np.array([1.0 + np.log(max(gamma, 3.0)) / gamma, 0.0])
        py = bench(_pykernels, model, grid, x0, u, gamma, args.repeat)
        c = bench(_ckernels, model, grid, x0, u, gamma, args.repeat)
        for k in ("forward", "vjp", "adjoint"):
            print(f"{gamma:8.0f} {k:>8} {c['substeps']:9d} {py[k]:11.4f} {c[k]:13.5f} {py[k] / c[k]:7.0f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
