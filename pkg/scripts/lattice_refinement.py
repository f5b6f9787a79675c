"""Grid-refinement study of the lattice solver on the zero-rate American put.

For each (steps, lattice points) pair prints the root value, its relative
error against the Black-Scholes closed form (American = European at zero
rate), and the maximum residual of the variational inequality on interior
continuation points.
"""

from __future__ import annotations

import argparse
import math
import time

from mfstop.coeffs import get_problem
from mfstop.harness import hjb_check
from mfstop.mkvsde import NoiseSource
from mfstop.problem import InitialLaw, ProblemInstance
from mfstop.stopping import SolverConfig, solve_extended


def bs_put(spot: float, strike: float, sigma: float, tau: float) -> float:
    cdf = lambda z: 0.5 * (1 + math.erf(z / math.sqrt(2)))  # noqa: E731
    d1 = (math.log(spot / strike) + 0.5 * sigma**2 * tau) / (sigma * math.sqrt(tau))
    return strike * cdf(-(d1 - sigma * math.sqrt(tau))) - spot * cdf(-d1)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--levels", default="25:200,50:400,100:800,200:400,400:800",
                        help="comma-separated steps:points pairs")
    args = parser.parse_args()

    oracle = bs_put(1.0, 1.0, 0.2, 1.0)
    print(f"oracle {oracle:.8f}")
    print(f"{'steps':>6} {'points':>6} {'root':>12} {'rel.err':>10} {'max|pde|':>10} {'mean|pde|':>10} {'sec':>6}")
    for level in args.levels.split(","):
        steps, points = (int(v) for v in level.split(":"))
        inst = ProblemInstance.build(get_problem("gbm_put"), InitialLaw.point([1.0]), 0.0, 1.0, steps)
        cfg = SolverConfig("lattice", lattice_points=points)
        start = time.perf_counter()
        root = solve_extended(inst, 1.0, cfg, NoiseSource(0)).root_value
        cont, _ = hjb_check(inst, [1.0], 0, cfg)
        print(f"{steps:6d} {points:6d} {root:12.8f} {(root - oracle) / oracle:10.2e} {cont.statistic:10.2e} "
              f"{cont.metadata['mean_abs']:10.2e} {time.perf_counter() - start:6.2f}")


if __name__ == "__main__":
    main()
