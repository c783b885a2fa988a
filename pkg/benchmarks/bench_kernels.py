"""Wall-clock comparison of the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 3] [--quick]

Each case runs the same inputs through both backends and reports the best
time of ``--repeat`` runs plus the speedup.
"""

from __future__ import annotations

import argparse
import math
import time

import numpy as np

from pobstop import InitialLaw, SimGrid, linear_gaussian_model, stein_stein_model
from pobstop import _kernels
from pobstop._kernels import fallback
from pobstop.pde import kalman_grid, solve_bermudan_kalman
from pobstop.pfilter import filter_summaries


def best_of(fn, repeat: int) -> float:
    best = math.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(quick: bool):
    scale = 0.25 if quick else 1.0
    rows = int(20000 * scale)
    rng = np.random.default_rng(0)
    la = rng.normal(0, 1, (rows, 500))
    u = rng.random(rows)
    out = np.empty(la.shape, dtype=np.int32)

    def branching(backend):
        mod = _kernels._core if backend == "compiled" else fallback
        return lambda: mod.branch_counts(la, u, out)

    lg = linear_gaussian_model()
    ss = stein_stein_model()
    paths = int(200 * scale)

    def lg_filter(backend):
        return lambda: filter_summaries(lg, SimGrid(1.0, 0.05, 0.01), InitialLaw.gaussian(0, 0.05), 500, 2.0,
                                        paths, 1, functionals=("x", "x2", "g", "eur"), eur_order=8,
                                        backend=backend)

    def ss_filter(backend):
        return lambda: filter_summaries(ss, SimGrid(1.0, 0.05, 0.05), InitialLaw.dirac(0.15), 1000,
                                        math.log(110), paths, 1, functionals=("x", "x2", "g"), backend=backend)

    n = 101 if quick else 201

    def pde(backend):
        return lambda: solve_bermudan_kalman(lg.params, 0.0025, kalman_grid(n1=n, n2=n), backend=backend)

    return [(f"branch_counts {rows}x500", branching),
            (f"linear-Gaussian filter N={paths} n=500", lg_filter),
            (f"Stein-Stein filter N={paths} n=1000", ss_filter),
            (f"explicit PDE {n}x{n}", pde)]


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--quick", action="store_true", help="smaller inputs")
    args = ap.parse_args(argv)
    if not _kernels.compiled_available():
        print("compiled extension not built; nothing to compare")
        return 1
    print(f"{'case':<42}{'compiled [s]':>14}{'python [s]':>14}{'speedup':>10}")
    for name, make in cases(args.quick):
        tc = best_of(make("compiled"), args.repeat)
        tp = best_of(make("python"), args.repeat)
        print(f"{name:<42}{tc:>14.3f}{tp:>14.3f}{tp / tc:>10.1f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
