"""Spread of the dynamic-programming self-consistency statistic over seeds.

Runs the regression-mode check on gbm_put (x = 1) and mf_ou (uniform initial
law on {-1, 1}, x = 0) with t_mid at the midpoint and reports |LHS - RHS|
next to the 1% + 2 SE threshold, so the declared tolerance can be compared
with the size of the statistic actually observed.
"""

from __future__ import annotations

import argparse

import numpy as np

from mfstop.coeffs import get_problem
from mfstop.harness import dpp_check
from mfstop.problem import InitialLaw, ProblemInstance
from mfstop.stopping import SolverConfig

CASES = {
    "gbm_put": (InitialLaw.point([1.0]), 1.0),
    "mf_ou": (InitialLaw.uniform([-1.0, 1.0]), 0.0),
}


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--paths", type=int, default=10_000)
    parser.add_argument("--steps", type=int, default=50)
    parser.add_argument("--seeds", type=int, default=10)
    args = parser.parse_args()

    cfg = SolverConfig(n_paths=args.paths)
    for name, (law, x) in CASES.items():
        inst = ProblemInstance.build(get_problem(name), law, 0.0, 1.0, args.steps)
        stats, thresholds = [], []
        for seed in range(args.seeds):
            rep = dpp_check(inst, [x], inst.grid.nodes[args.steps // 2], seed, cfg)
            stats.append(rep.statistic)
            thresholds.append(rep.threshold)
            print(f"{name:8s} seed={seed:3d}  lhs={rep.metadata['lhs']:.6f}  |lhs-rhs|={rep.statistic:.2e}  "
                  f"threshold={rep.threshold:.2e}  {'pass' if rep.passed else 'FAIL'}")
        ratio = np.asarray(stats) / np.asarray(thresholds)
        print(f"{name:8s} max statistic {max(stats):.2e}, max statistic/threshold {ratio.max():.3f}")


if __name__ == "__main__":
    main()
