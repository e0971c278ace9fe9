"""Compiled kernels against the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat 5] [--csv out.csv]

Prints best-of-``repeat`` wall times per kernel and backend, the speedup,
and the largest absolute difference between the two results.
"""

import argparse
import csv
import sys
import timeit

import numpy as np

from freeloop import _fallback, kernels
from freeloop.systems import magnetic, mechanical, reeb


def cases():
    rng = np.random.default_rng(0)
    for L in (mechanical(), magnetic(2.0), reeb()):
        tab = L.kernel_tables()
        for N in (256, 4096):
            s = np.arange(N + 1)[:, None] / N
            nodes = s * np.array([1.0, 0.0]) + 0.1 * np.sin(2 * np.pi * s) + rng.random(2)
            yield (
                f"loop_action {L.name} N={N}",
                lambda tab=tab, nodes=nodes: kernels._ext.loop_action(*tab.args(), nodes, 1.3, 0.7),
                lambda tab=tab, nodes=nodes: _fallback.loop_action(tab, nodes, 1.3, 0.7),
            )
        x0, v0 = np.array([0.1, 0.2]), np.array([0.5, -0.3])
        for var in (False, True):
            yield (
                f"el_rk4 {L.name} 2000 steps{' +variational' if var else ''}",
                lambda tab=tab, var=var: kernels._ext.el_rk4(*tab.args(), x0, v0, 1e-3, 2000, var),
                lambda tab=tab, var=var: _fallback.el_rk4(tab, x0, v0, 1e-3, 2000, var),
            )
    n = 4096
    sub, sup = rng.normal(size=n), rng.normal(size=n)
    diag = 4.0 + np.abs(sub) + np.abs(sup)
    rhs = rng.normal(size=(n, 2))
    yield (
        f"cyclic_tridiag_solve n={n}",
        lambda: kernels._ext.cyclic_tridiag_solve(sub, diag, sup, rhs.copy()),
        lambda: _fallback.cyclic_tridiag_solve(sub, diag, sup, rhs.copy()),
    )


def max_diff(a, b):
    if isinstance(a, tuple):
        return max((max_diff(x, y) for x, y in zip(a, b) if x is not None), default=0.0)
    return float(np.max(np.abs(np.asarray(a, float) - np.asarray(b, float))))


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--csv", default=None, help="also write the table as CSV")
    args = p.parse_args(argv)
    if not kernels.USING_COMPILED:
        print("compiled kernels unavailable; build with `pip install -e . --no-build-isolation`", file=sys.stderr)
        return 1
    rows = []
    print(f"{'kernel':<44} {'compiled ms':>12} {'numpy ms':>10} {'speedup':>8} {'max diff':>10}")
    for name, fast, slow in cases():
        t_fast = min(timeit.repeat(fast, number=1, repeat=args.repeat)) * 1e3
        t_slow = min(timeit.repeat(slow, number=1, repeat=args.repeat)) * 1e3
        diff = max_diff(fast(), slow())
        rows.append((name, t_fast, t_slow, t_slow / t_fast, diff))
        print(f"{name:<44} {t_fast:12.3f} {t_slow:10.3f} {t_slow / t_fast:8.1f} {diff:10.2e}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kernel", "compiled_ms", "numpy_ms", "speedup", "max_abs_diff"])
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
