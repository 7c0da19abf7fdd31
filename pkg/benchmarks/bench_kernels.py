"""Compiled kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--n 2001] [--paths 2000] [--horizon 20]

Each line reports the best of a few repeats after one warm-up call.
"""

import argparse
import time

import numpy as np
import scipy.sparse as sp

from durable_qvi import kernels
from durable_qvi.hjbqvi import (DiscreteValue, QVIConfig, bounds, default_grid, discretize_generator,
                                intervention, optimize_controls, pack_coefficients, PolicyField)
from durable_qvi.notc import solve_no_tc
from durable_qvi.params import SCENARIOS, COST_SCENARIO
from durable_qvi.simulate import SimConfig, no_tc_strategy, simulate_paths


def best_of(fn, repeat=3):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def line(name, t_nb, t_np):
    print(f"{name:<28s} numba {t_nb * 1e3:10.2f} ms   numpy {t_np * 1e3:10.2f} ms   x{t_np / t_nb:7.1f}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=2001)
    ap.add_argument("--paths", type=int, default=2000)
    ap.add_argument("--horizon", type=float, default=20.0)
    args = ap.parse_args()

    p = COST_SCENARIO.params
    sol = solve_no_tc(p)
    grid = default_grid(p, QVIConfig(n=args.n), sol)
    lo, hi = bounds(grid.nodes, p, sol)
    v = 0.5 * (lo + hi)
    coef = pack_coefficients(p, grid)
    print(f"grid n={grid.n}, paths={args.paths}, horizon={args.horizon}")

    for analytic in (True, False):
        tag = "controls (closed-form pi)" if analytic else "controls (golden pi)"
        line(tag, best_of(lambda: kernels.controls_nb(v, coef, 1e-9, analytic)),
             best_of(lambda: kernels.controls_np(v, coef, 1e-9, analytic)))

    c, pi, q, _ = kernels.controls_nb(v, coef, 1e-9, True)
    line("assemble", best_of(lambda: kernels.assemble_nb(c, pi, q, coef, True, hi[-1])),
         best_of(lambda: kernels.assemble_np(c, pi, q, coef, True, hi[-1])))

    A, b = discretize_generator(PolicyField(c, pi, q, None), grid, p, float(lo[-1]))
    A = sp.csr_matrix(A)
    Mv, _ = intervention(DiscreteValue(grid, v), p)
    u = np.maximum(Mv.values, v)
    parts = (A.indptr.astype(np.int64), A.indices.astype(np.int64), A.data, A.diagonal(), b, u)

    def psor(fn):
        return lambda: fn(*parts, u.copy(), 1.2, 1e-8, 1_000_000)

    line("psor (one LCP)", best_of(psor(kernels.psor_nb), 1), best_of(psor(kernels.psor_np), 1))

    pa = SCENARIOS["b"].params
    strat = no_tc_strategy(solve_no_tc(pa))
    cfg = SimConfig(T=args.horizon, n_paths=args.paths, seed=1)
    slow = SimConfig(T=args.horizon, n_paths=args.paths, seed=1, fast=False)
    t_fast = best_of(lambda: simulate_paths(pa, strat, 1.0, 1.0, config=cfg), 1)
    t_gen = best_of(lambda: simulate_paths(pa, strat, 1.0, 1.0, config=slow), 1)
    t_np = best_of(lambda: simulate_paths(pa, strat, 1.0, 1.0, config=cfg, backend="numpy"), 1)
    line("simulate (lane kernel)", t_fast, t_np)
    line("simulate (generic kernel)", t_gen, t_np)
    steps = args.paths * round(args.horizon * 250)
    print(f"{'ns per path-step':<28s} lane {t_fast / steps * 1e9:.1f}   generic {t_gen / steps * 1e9:.1f}"
          f"   numpy {t_np / steps * 1e9:.1f}")


if __name__ == "__main__":
    main()
