"""Scan alpha across the white-noise Hilbert-Schmidt threshold in one dimension.

With B = I the Dirichlet modes contribute roughly k^(4 alpha - 2) each, so
the partial sums stay bounded iff alpha < 1/4. The growth exponent reported
by chs_estimate should change sign there; the last column is the exponent
the tail model predicts for the same K/4, K/2, K increments.
"""
import argparse
import math

import numpy as np

from reactodiff.deterministic import Problem
from reactodiff.discretization import BoundaryCondition, CoefficientSet, build_grid
from reactodiff.stochastic import NoiseModel, chs_estimate
from reactodiff.yosida import ReactionPolynomial


def tail_exponent(alpha, K):
    k = np.arange(1, K + 1, dtype=float)
    c = np.cumsum(k ** (4 * alpha - 2))
    d1 = c[K // 2 - 1] - c[K // 4 - 1]
    d2 = c[K - 1] - c[K // 2 - 1]
    return math.log2(d2 / d1)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=256)
    ap.add_argument("--K", type=int, default=32)
    ap.add_argument("--alphas", type=float, nargs="*", default=[0.1, 0.15, 0.2, 0.23, 0.25, 0.27, 0.3, 0.35, 0.4])
    args = ap.parse_args()
    grid = build_grid(0.0, math.pi, args.n)
    problem = Problem.build(CoefficientSet.laplacian(1), grid, BoundaryCondition("dirichlet"),
                            ReactionPolynomial.zero())
    print(f"{'alpha':>6} {'value':>12} {'exponent':>9} {'diverging':>9} {'tail':>7}")
    for a in args.alphas:
        r = chs_estimate(problem, NoiseModel(grid, args.K, a), 0.0, 1.0)
        print(f"{a:6.3f} {r.value:12.5g} {r.growth_exponent:9.4f} {str(r.diverging):>9} "
              f"{tail_exponent(a, args.K):7.4f}")


if __name__ == "__main__":
    main()
