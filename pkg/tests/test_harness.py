import json

import numpy as np
import pytest

from mfstop.coeffs import get_problem
from mfstop.harness import (
    MARGINAL_C,
    VIA_CONSEQUENCES,
    ValidationReport,
    digest_of,
    disintegration_check,
    dpp_check,
    flow_check,
    growth_continuity_audit,
    hjb_check,
    marginal_invariance_report,
    stopping_family_invariance_check,
    summary_table,
)
from mfstop.problem import GridAlignmentError, InitialLaw, ProblemInstance
from mfstop.stopping import SolverConfig

DETERMINISTIC = ("det_running", "det_identity", "det_square")
MODES = ("regression", "lattice")


def build(name, law=None, steps=50, **params):
    return ProblemInstance.build(get_problem(name, **params), law or InitialLaw.point([1.0]), 0.0, 1.0, steps)


class TestReport:
    def test_verdict(self):
        assert ValidationReport("a", "d", 1.0, 1.0).passed
        assert not ValidationReport("a", "d", 1.0 + 1e-12, 1.0).passed
        assert not ValidationReport("a", "d", float("nan"), 1.0).passed

    def test_json(self):
        rep = ValidationReport("a", "d", 0.5, 1.0, 0.1, 0.01, {"k": np.arange(2)})
        data = json.loads(rep.to_json())
        assert data["passed"] is True and data["metadata"]["k"] == [0, 1]

    def test_digest_is_stable(self):
        assert digest_of(a=1, b=[1.0, 2.0]) == digest_of(b=[1.0, 2.0], a=1)
        assert digest_of(a=1) != digest_of(a=2)

    def test_summary_table(self):
        table = summary_table([ValidationReport("dpp", "d", 0.0, 1.0), ValidationReport("flow", "d", 2.0, 1.0)])
        lines = table.splitlines()
        assert lines[0].split() == ["check", "statistic", "threshold", "se", "result"]
        assert lines[1].endswith("pass") and lines[2].endswith("FAIL")


class TestDynamicProgramming:
    @pytest.mark.parametrize("mode", MODES)
    @pytest.mark.parametrize("name", DETERMINISTIC)
    def test_exact_on_deterministic_problems(self, name, mode):
        rep = dpp_check(build(name, steps=20), [1.3], 0.5, 0, SolverConfig(mode, n_paths=200))
        assert rep.statistic == 0.0 and rep.passed

    def test_running_reward_sides(self):
        rep = dpp_check(build("det_running", steps=20), [0.0], 0.5, 0, SolverConfig(n_paths=50))
        # sums of the grid's time steps carry rounding only
        assert rep.metadata["lhs"] == pytest.approx(1.0, abs=1e-12)
        assert rep.metadata["rhs"] == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("mode", MODES)
    def test_put(self, mode):
        rep = dpp_check(build("gbm_put"), [1.0], 0.5, 1, SolverConfig(mode, n_paths=5000))
        assert rep.passed
        assert rep.threshold == pytest.approx(0.01 * abs(rep.metadata["lhs"]) + 2 * rep.se)
        assert "threshold" in rep.metadata

    def test_alignment(self):
        with pytest.raises(GridAlignmentError):
            dpp_check(build("gbm_put"), [1.0], 0.505, 0, SolverConfig(n_paths=100))
        with pytest.raises(GridAlignmentError):
            dpp_check(build("gbm_put"), [1.0], 0.0, 0, SolverConfig(n_paths=100))

    def test_reproducible(self):
        args = (build("mf_ou", InitialLaw.uniform([-1.0, 1.0])), [0.0], 0.5, 3, SolverConfig(n_paths=2000))
        assert dpp_check(*args).to_json() == dpp_check(*args).to_json()


class TestDisintegration:
    @pytest.mark.parametrize("mode", MODES)
    def test_square_payoff_without_dynamics(self, mode):
        rep = disintegration_check(build("det_square", InitialLaw.uniform([-1.0, 1.0])), 10, 0, SolverConfig(mode))
        assert rep.statistic == 0.0
        assert rep.metadata["direct"] == rep.metadata["disintegrated"] == 1.0

    @pytest.mark.parametrize("mode", MODES)
    def test_point_mass(self, mode):
        rep = disintegration_check(build("gbm_put", steps=20), 2000, 0, SolverConfig(mode))
        assert rep.passed and rep.metadata["note"] == VIA_CONSEQUENCES

    @pytest.mark.parametrize("mode", MODES)
    def test_mean_field_ou(self, mode):
        inst = build("mf_ou", InitialLaw.uniform([-1.0, 1.0]), kappa=1.0, sigma0=0.3)
        rep = disintegration_check(inst, 10_000, 0, SolverConfig(mode))
        assert rep.statistic <= 2 * rep.se + 0.01
        assert rep.threshold == pytest.approx(2 * rep.se + 0.01)


class TestFamily:
    def test_point_mass_measure_free(self):
        rep = stopping_family_invariance_check(build("gbm_put"), [1.0], 0, SolverConfig(n_paths=3000))
        assert rep.statistic == 0.0

    def test_running_reward(self):
        rep = stopping_family_invariance_check(build("det_running"), [1.0], 0, SolverConfig(n_paths=100))
        assert rep.statistic == 0.0 and rep.metadata["blind"] == pytest.approx(1.0, abs=1e-12)

    def test_put_with_spread_initial_law(self):
        inst = build("gbm_put", InitialLaw.uniform([0.8, 0.9, 1.1, 1.2]))
        rep = stopping_family_invariance_check(inst, [1.0], 2, SolverConfig(n_paths=10_000))
        assert rep.passed
        assert rep.threshold == pytest.approx(0.005 * abs(rep.metadata["blind"]) + 2 * rep.se)

    def test_regression_only(self):
        with pytest.raises(ValueError):
            stopping_family_invariance_check(build("gbm_put"), [1.0], 0, SolverConfig("lattice"))


class TestGrowthContinuity:
    def test_square_payoff_without_dynamics(self):
        reports = growth_continuity_audit(["det_square"], SolverConfig())
        growth, continuity = reports
        assert growth.statistic < 1.0 and growth.passed
        centers, offsets = (0.8, 1.0, 1.2), (-0.2, 0.0, 0.2)
        for delta, got in zip((0.2, 0.1, 0.05), continuity.metadata["maxima"]):
            xs = np.add.outer(centers, offsets).ravel()
            ys = xs + delta / 2
            assert got == pytest.approx(np.max(np.abs(xs**2 - ys**2)), abs=1e-10)
            assert got <= delta * np.max(np.abs(xs + ys))
        assert continuity.passed

    def test_put_maxima_strictly_decrease(self):
        _, continuity = growth_continuity_audit(["gbm_put"], SolverConfig())
        maxima = continuity.metadata["maxima"]
        assert maxima[0] > maxima[1] > maxima[2] and continuity.statistic == 0.0

    def test_battery(self):
        names = ["gbm_put", "mf_ou", "etf_meanfield", "det_running", "det_identity", "det_square"]
        reports = growth_continuity_audit(names, SolverConfig())
        assert len(reports) == 2 * len(names)
        assert all(r.passed for r in reports), [r.name for r in reports if not r.passed]


class TestWrappers:
    def test_flow(self):
        rep = flow_check(build("etf_meanfield", InitialLaw.uniform([0.9, 1.1])), [1.0], 0.5, 200, 0)
        assert rep.statistic == 0.0 and rep.passed

    def test_marginals_threshold(self):
        inst = build("mf_ou", InitialLaw.gaussian([0.0], [[1.0]]))
        rep = marginal_invariance_report(inst, 1024, 5)
        assert rep.threshold == pytest.approx(MARGINAL_C * 1024 ** -0.25)
        assert rep.passed

    def test_marginals_without_dynamics(self):
        rep = marginal_invariance_report(build("det_identity", InitialLaw.uniform([0.0, 1.0, 2.0])), 30, 0)
        assert rep.statistic == 0.0

    def test_hjb(self):
        cont, obstacle = hjb_check(build("gbm_put"), [1.0], 0, SolverConfig("lattice"))
        assert cont.passed and obstacle.passed
        assert obstacle.threshold == 1e-10
