"""Acceptance criteria, one test each.

Every test records a single PASS/FAIL line that pytest prints in an
"acceptance criteria" section at the end of the run.  Run just this file with

    pytest tests/test_acceptance.py -v
"""

import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from conftest import ACCEPTANCE
from oracles import BS_PUT_ATM

from mfstop.coeffs import (
    MomentFunctional,
    builtin_library,
    coordinate_mean,
    get_problem,
    second_moment,
)
from mfstop.harness import (
    disintegration_check,
    dpp_check,
    growth_continuity_audit,
    hjb_check,
    marginal_invariance_report,
    stopping_family_invariance_check,
)
from mfstop.hjb import (
    CylindricalFunction,
    QuadraticOuter,
    apply_generator,
    generator_fd_oracle,
)
from mfstop.mkvsde import NoiseSource, check_flow_property
from mfstop.problem import InitialLaw, ProblemInstance
from mfstop.stopping import (
    SolverConfig,
    snell_path,
    solve_extended,
    supermartingale_increments,
)

DETERMINISTIC = {"det_running": lambda x: 1.0, "det_identity": lambda x: x, "det_square": lambda x: x * x}


def record(number, ok, detail):
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    assert ok, line


def build(name, law, steps=50, **params):
    return ProblemInstance.build(get_problem(name, **params), law, 0.0, 1.0, steps)


@pytest.fixture(scope="module")
def put_regression():
    """gbm_put in regression mode, 1e5 paths and 50 steps, with its runtime."""
    start = time.perf_counter()
    inst = build("gbm_put", InitialLaw.point([1.0]))
    sol = solve_extended(inst, 1.0, SolverConfig(n_paths=100_000), NoiseSource(2024))
    return inst, sol, time.perf_counter() - start


def test_deterministic_battery_is_exact():
    start = time.perf_counter()
    worst = 0.0
    x = 1.3
    for name, exact in DETERMINISTIC.items():
        inst = build(name, InitialLaw.uniform([0.5, 1.5]), steps=20)
        for mode in ("regression", "lattice"):
            cfg = SolverConfig(mode, n_paths=256)
            root = solve_extended(inst, x, cfg, NoiseSource(0)).root_value
            dpp = dpp_check(inst, [x], 0.5, 0, cfg).statistic
            dis = disintegration_check(inst, 256, 0, cfg)
            mean_exact = 0.5 * (exact(0.5) + exact(1.5))
            gaps = [abs(root - exact(x)), dpp, dis.statistic, abs(dis.metadata["disintegrated"] - mean_exact)]
            worst = max(worst, *gaps)
        flow = check_flow_property(inst, [x], 0.5, 256, NoiseSource(0))
        worst = max(worst, flow.total)
    elapsed = time.perf_counter() - start
    record(1, worst <= 1e-10 and elapsed < 5.0, f"max deviation {worst:.3g} (<= 1e-10), {elapsed:.2f} s (< 5 s)")


def test_american_put_oracle(put_regression):
    start = time.perf_counter()
    lat = solve_extended(build("gbm_put", InitialLaw.point([1.0]), steps=200), 1.0,
                         SolverConfig("lattice", lattice_points=400), NoiseSource(0))
    lat_err = abs(lat.root_value - BS_PUT_ATM) / BS_PUT_ATM
    _, sol, reg_time = put_regression
    reg_gap = abs(sol.root_value - BS_PUT_ATM)
    reg_bound = 0.01 * BS_PUT_ATM + 2 * sol.root_se
    elapsed = time.perf_counter() - start + reg_time
    ok = lat_err <= 0.005 and reg_gap <= reg_bound and elapsed < 60
    record(2, ok, f"lattice {lat.root_value:.6f} ({100 * lat_err:.3f}% <= 0.5%), regression {sol.root_value:.6f} "
                  f"gap {reg_gap:.2e} <= {reg_bound:.2e}, oracle {BS_PUT_ATM:.6f}, {elapsed:.1f} s (< 60 s)")


def test_marginal_invariance():
    start = time.perf_counter()
    inst = build("mf_ou", InitialLaw.gaussian([0.0], [[1.0]]))
    rep = marginal_invariance_report(inst, 4096, 7, couplings=2)
    elapsed = time.perf_counter() - start
    record(3, rep.passed and elapsed < 30, f"max-node W2 {rep.statistic:.4f} <= c N^-1/4 = {rep.threshold:.4f}, "
                                           f"{elapsed:.2f} s (< 30 s)")


def test_flow_property():
    worst, names = 0.0, []
    for name, spec in builtin_library().items():
        law = InitialLaw.uniform([[0.8] * spec.dim_x, [1.2] * spec.dim_x])
        inst = ProblemInstance.build(spec, law, 0.0, 1.0, 50)
        res = check_flow_property(inst, [1.0] * spec.dim_x, 0.5, 1000, NoiseSource(1))
        worst = max(worst, res.total)
        names.append(name)
    record(4, worst == 0.0, f"restart discrepancy {worst} on {len(names)} problems")


def test_dynamic_programming_principle():
    start = time.perf_counter()
    cfg = SolverConfig(n_paths=10_000)
    cases = [("gbm_put", InitialLaw.point([1.0]), 1.0), ("mf_ou", InitialLaw.uniform([-1.0, 1.0]), 0.0)]
    parts, ok = [], True
    for name, law, x in cases:
        for seed in (1, 2, 3):
            rep = dpp_check(build(name, law), [x], 0.5, seed, cfg, tolerance=0.01)
            ok &= rep.passed
            parts.append(f"{name}/{seed} {rep.statistic:.1e}<={rep.threshold:.1e}")
    elapsed = time.perf_counter() - start
    record(5, ok and elapsed < 120, f"{', '.join(parts)}; {elapsed:.1f} s (< 120 s)")


def _random_phi(d, rng):
    pool = [MomentFunctional((0,) * d)] + [coordinate_mean(i, d) for i in range(d)]
    pool += [second_moment(i, j, d) for i in range(d) for j in range(i, d)]
    k = int(rng.integers(1, 4))
    return CylindricalFunction(QuadraticOuter.random(d, k, rng), tuple(pool[j] for j in rng.choice(len(pool), k)))


def test_generator():
    rng = np.random.default_rng(20240601)
    specs = [get_problem("mf_ou"), get_problem("mf_ou", d=2), get_problem("etf_meanfield"), get_problem("gbm_put")]
    worst_fd, worst_lin = 0.0, 0.0
    for probe in range(100):
        spec = specs[probe % len(specs)]
        d = spec.dim_x
        phi = _random_phi(d, rng)
        mu = 1.0 + 0.5 * rng.normal(size=(int(rng.integers(2, 12)), d))
        x, t = 1.0 + 0.5 * rng.normal(size=d), float(rng.uniform())
        analytic = apply_generator(phi, spec, t, x, mu)
        oracle = generator_fd_oracle(phi, spec, t, x, mu)
        worst_fd = max(worst_fd, abs(analytic - oracle) / max(1.0, abs(analytic)))
        other = _random_phi(d, rng)
        a, b = rng.normal(size=2)
        combo = apply_generator(CylindricalFunction.combine(a, phi, b, other), spec, t, x, mu)
        parts = a * analytic + b * apply_generator(other, spec, t, x, mu)
        worst_lin = max(worst_lin, abs(combo - parts) / max(1.0, abs(combo)))
    record(6, worst_fd <= 1e-6 and worst_lin <= 1e-12,
           f"FD oracle relative error {worst_fd:.2e} (<= 1e-6), linearity {worst_lin:.2e} (<= 1e-12), 100 probes")


def test_variational_inequality_residual():
    results = []
    for steps, points in ((50, 400), (100, 800)):
        inst = build("gbm_put", InitialLaw.point([1.0]), steps=steps)
        results.append(hjb_check(inst, [1.0], 0, SolverConfig("lattice", lattice_points=points)))
    (cont, obst), (cont_fine, obst_fine) = results
    ok = (cont.statistic <= 0.01 and cont_fine.statistic < cont.statistic
          and obst.statistic <= obst.threshold and obst_fine.statistic <= obst_fine.threshold)
    record(7, ok, f"max |pde| {cont.statistic:.2e} (<= 0.01, {cont.metadata['points']} pts) -> "
                  f"{cont_fine.statistic:.2e} refined; max |u-g| {max(obst.statistic, obst_fine.statistic):.2e} "
                  f"(<= tie_eps 1e-10)")


def test_snell_supermartingale(put_regression):
    inst, sol, _ = put_regression
    env = snell_path(inst.spec, sol.surface.estimates, sol.paths, sol.flow)
    mean, se = supermartingale_increments(env)
    worst = float(np.max(mean - 2 * se))
    states = sol.paths.states
    g = np.stack([inst.spec.terminal_reward(states[:, k]) for k in range(states.shape[1])], axis=1)
    obstacle = float(np.mean(sol.surface.estimates >= g - sol.rule.tie_eps))
    terminal = bool(np.array_equal(sol.surface.estimates[:, -1], g[:, -1]))
    record(8, worst <= 0 and obstacle == 1.0 and terminal,
           f"max(mean increment - 2 SE) {worst:.2e} (<= 0), obstacle met at {100 * obstacle:.1f}% of points, "
           f"terminal exact {terminal}")


def test_growth_and_rule_family():
    reports = growth_continuity_audit(list(builtin_library()), SolverConfig())
    growth = [r for r in reports if r.name.startswith("growth")]
    growth_ok = all(r.passed for r in growth)
    worst_ratio = max(r.statistic / r.threshold for r in growth)
    family = []
    for law in (InitialLaw.point([1.0]), InitialLaw.uniform([0.8, 0.9, 1.1, 1.2])):
        family.append(stopping_family_invariance_check(build("gbm_put", law), [1.0], 5, SolverConfig(n_paths=10_000),
                                                       tolerance=0.005))
    ok = growth_ok and all(r.passed for r in family)
    record(9, ok, f"growth ratio <= {worst_ratio:.2f} of bound on {len(growth)} problems; family gap "
                  + ", ".join(f"{r.statistic:.1e}<={r.threshold:.1e}" for r in family))


def _run_cli(args, out, threads):
    env = dict(os.environ, OMP_NUM_THREADS=str(threads), OPENBLAS_NUM_THREADS=str(threads),
               MKL_NUM_THREADS=str(threads))
    proc = subprocess.run([sys.executable, "-m", "mfstop.cli", *args, "--out", str(out)], env=env,
                          capture_output=True, check=False)
    return proc.returncode, proc.stdout


def test_cli_determinism(tmp_path):
    config = tmp_path / "run.toml"
    config.write_text('problem = "mf_ou"\nparams = {payoff = "put"}\nN = 2000\nM = 20\nn_eval = 5000\n'
                      'initial = "uniform"\ninitial_atoms = [0.8, 1.2]\nx0 = [1.0]\nseed = 11\n')
    commands = [["simulate"], ["price"], ["price", "--mode", "lattice"], ["validate"], ["hjb-residual"],
                ["list-problems"]]
    mismatched = []
    for cmd in commands:
        outputs = []
        for threads in (1, 4):
            out = tmp_path / f"{'-'.join(cmd)}-{threads}"
            extra = [] if cmd == ["list-problems"] else ["--config", str(config)]
            code, stdout = _run_cli(cmd + extra, out, threads)
            files = {p.name: p.read_bytes() for p in sorted(out.glob("*"))} if out.exists() else {}
            outputs.append((code, stdout, files))
        if outputs[0] != outputs[1] or outputs[0][0] not in (0, 4):
            mismatched.append(" ".join(cmd))
    rule = tmp_path / "price-1" / "rule.json"
    policy = []
    for threads in (1, 4):
        out = tmp_path / f"policy-{threads}"
        code, stdout = _run_cli(["policy", "--config", str(config), "--rule", str(rule)], out, threads)
        policy.append((code, stdout, {p.name: p.read_bytes() for p in sorted(out.glob("*"))}))
    if policy[0] != policy[1] or policy[0][0] != 0:
        mismatched.append("policy")
    record(10, not mismatched, f"{len(commands) + 1} commands byte-identical under 1 and 4 threads"
                               if not mismatched else f"differences in {mismatched}")


if __name__ == "__main__":
    sys.exit(pytest.main([str(Path(__file__)), "-v"]))
