"""Timing comparison of the compiled and pure-Python coordinate-descent cores.

Both backends solve the same penalized quadratic instances from the same warm
start; the script checks they agree before reporting times, so a speedup
never comes from computing something different.

Usage: python3 benchmarks/bench_cd.py [--sizes 100 400 800] [--repeats 3]
"""

import argparse
import time

import numpy as np

from tlamp._cd_python import cd_solve as python_solve

try:
    from tlamp._cd_kernel import cd_solve as compiled_solve
except ImportError:
    compiled_solve = None


def make_instance(rng, p):
    a = rng.normal(size=(p, p))
    q = a @ a.T / p + 0.5 * np.eye(p)
    c = rng.normal(size=p)
    w = rng.uniform(0.5, 1.5, p)
    return q, c, w


def best_time(solver, q, c, w, repeats, tol):
    best = float("inf")
    result = None
    for _ in range(repeats):
        b = np.zeros(q.shape[0])
        start = time.perf_counter()
        sweeps, kkt, converged = solver(q, c, w, b, 10000, tol)
        best = min(best, time.perf_counter() - start)
        result = (b, sweeps, kkt, converged)
    return best, result


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", type=int, nargs="+",
                        default=[100, 400, 800])
    parser.add_argument("--repeats", type=int, default=3)
    parser.add_argument("--tol", type=float, default=1e-10)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    if compiled_solve is None:
        print("compiled kernel not built; timing the Python backend only")
    rng = np.random.default_rng(args.seed)
    header = f"{'p':>6} {'sweeps':>7} {'python_ms':>10} {'compiled_ms':>12} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for p in args.sizes:
        q, c, w = make_instance(rng, p)
        t_py, (b_py, sweeps, kkt, converged) = best_time(
            python_solve, q, c, w, args.repeats, args.tol)
        if not converged:
            raise SystemExit(f"python backend did not converge at p={p} "
                             f"(kkt {kkt:.3e}); raise --tol or sweeps")
        if compiled_solve is None:
            print(f"{p:>6} {sweeps:>7} {t_py * 1e3:>10.2f} {'-':>12} {'-':>8}")
            continue
        t_c, (b_c, sweeps_c, kkt_c, converged_c) = best_time(
            compiled_solve, q, c, w, args.repeats, args.tol)
        gap = float(np.max(np.abs(b_py - b_c))) if p else 0.0
        if not converged_c or gap > 1e-9:
            raise SystemExit(f"backends disagree at p={p}: max abs diff "
                             f"{gap:.3e}, compiled converged={converged_c}")
        print(f"{p:>6} {sweeps:>7} {t_py * 1e3:>10.2f} {t_c * 1e3:>12.2f} "
              f"{t_py / t_c:>8.1f}")


if __name__ == "__main__":
    main()
