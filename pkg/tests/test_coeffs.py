import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mfstop.coeffs import (
    CoefficientError,
    CoefficientSpec,
    MomentFunctional,
    ProblemNotFoundError,
    audit_assumptions,
    builtin_library,
    coordinate_mean,
    eval_b,
    eval_f,
    eval_g,
    eval_sigma,
    get_problem,
    random_probes,
    second_moment,
)
from mfstop.measure import ParticleEnsemble


def zero_spec(g=lambda X: np.zeros(X.shape[0]), growth=1.0):
    return CoefficientSpec(
        name="zero", dim_x=1, dim_w=1, moments=(),
        drift=lambda t, X, lam: np.zeros((X.shape[0], 1)),
        diffusion=lambda t, X, lam: np.zeros((X.shape[0], 1, 1)),
        running_reward=lambda t, X, lam: np.zeros(X.shape[0]),
        terminal_reward=g, declared_lipschitz=1.0, declared_growth=growth)


finite = st.floats(-10, 10, allow_nan=False)


class TestEvaluation:
    def test_zero_drift(self):
        assert np.array_equal(eval_b(zero_spec(), 0.3, [1.7], [[0.0], [4.0]]), [0.0])

    def test_mf_ou_drift_at_mean_is_zero(self):
        spec = get_problem("mf_ou", kappa=1.0)
        assert eval_b(spec, 0.0, [2.0], [1.0, 3.0])[0] == 0.0

    def test_mf_ou_drift_value(self):
        spec = get_problem("mf_ou", kappa=0.5)
        assert eval_b(spec, 0.0, [0.0], [1.0, 3.0])[0] == pytest.approx(1.0, abs=1e-15)

    def test_constant_diffusion(self):
        spec = get_problem("mf_ou", sigma0=0.7)
        for x in (-3.0, 0.0, 5.0):
            assert eval_sigma(spec, 0.1, [x], [1.0, 2.0])[0, 0] == 0.7

    def test_zero_diffusion(self):
        assert np.array_equal(eval_sigma(get_problem("det_square"), 0.0, [2.0], [0.0]), np.zeros((1, 1)))

    def test_gbm_diffusion(self):
        spec = get_problem("gbm_put", sigma0=0.2)
        assert eval_sigma(spec, 0.0, [1.5], [1.0])[0, 0] == pytest.approx(0.3, abs=1e-15)

    def test_rewards(self):
        assert eval_f(get_problem("gbm_put"), 0.2, [1.0], [1.0]) == 0.0
        assert eval_g(get_problem("gbm_put", strike=1.0), [0.8]) == pytest.approx(0.2, abs=1e-15)
        assert eval_g(get_problem("det_square"), [-3.0]) == 9.0
        assert eval_f(get_problem("det_running"), 0.0, [5.0], [5.0]) == 1.0

    def test_non_finite_is_reported(self):
        spec = CoefficientSpec(
            name="bad", dim_x=1, dim_w=1, moments=(),
            drift=lambda t, X, lam: np.full((X.shape[0], 1), np.nan),
            diffusion=lambda t, X, lam: np.zeros((X.shape[0], 1, 1)),
            running_reward=lambda t, X, lam: np.zeros(X.shape[0]),
            terminal_reward=lambda X: X[:, 0], declared_lipschitz=1.0, declared_growth=1.0)
        with pytest.raises(CoefficientError, match="t=0.5"):
            eval_b(spec, 0.5, [1.0], [1.0])

    def test_declared_constants_must_be_positive(self):
        with pytest.raises(ValueError):
            CoefficientSpec("x", 1, 1, (), None, None, None, None, 0.0, 1.0)


class TestMoments:
    def test_degree_limit(self):
        with pytest.raises(ValueError):
            MomentFunctional((2, 1))
        with pytest.raises(ValueError):
            MomentFunctional((-1,))

    def test_gradient_and_hessian(self):
        h = second_moment(0, 1, 2)
        pts = np.array([[2.0, 3.0]])
        assert np.array_equal(h.evaluate(pts), [6.0])
        assert np.array_equal(h.gradient(pts), [[3.0, 2.0]])
        assert np.array_equal(h.hessian(), [[0.0, 1.0], [1.0, 0.0]])
        sq = second_moment(1, 1, 2)
        assert np.array_equal(sq.hessian(), [[0.0, 0.0], [0.0, 2.0]])
        assert np.array_equal(coordinate_mean(0, 2).hessian(), np.zeros((2, 2)))

    @given(arrays(float, (6, 2), elements=finite), st.randoms(use_true_random=False))
    def test_moment_vector_permutation_invariant(self, pts, rnd):
        spec = get_problem("mf_ou", d=2)
        perm = list(range(6))
        rnd.shuffle(perm)
        a, b = spec.moment_vector(pts), spec.moment_vector(pts[perm])
        assert np.allclose(a, b, rtol=1e-12, atol=1e-12)


class TestLibrary:
    def test_catalog(self):
        lib = builtin_library()
        assert {"gbm_put", "mf_ou", "etf_meanfield", "det_running", "det_identity", "det_square"} <= set(lib)
        gbm = lib["gbm_put"]
        assert (gbm.dim_x, gbm.dim_w, gbm.n_moments) == (1, 1, 0)
        assert lib["mf_ou"].n_moments == 1

    def test_missing(self):
        with pytest.raises(ProblemNotFoundError):
            get_problem("missing")

    def test_unknown_parameter(self):
        with pytest.raises(ValueError):
            get_problem("gbm_put", kappa=1.0)

    @given(finite, arrays(float, (4, 1), elements=finite), arrays(float, (7, 1), elements=finite))
    def test_measure_free_specs_ignore_mu(self, x, mu, nu):
        spec = get_problem("gbm_put")
        assert np.array_equal(eval_b(spec, 0.1, [x], mu), eval_b(spec, 0.1, [x], nu))
        assert np.array_equal(eval_sigma(spec, 0.1, [x], mu), eval_sigma(spec, 0.1, [x], nu))
        assert eval_f(spec, 0.1, [x], mu) == eval_f(spec, 0.1, [x], nu)


class TestAudit:
    def test_zero_coefficients(self):
        rng = np.random.default_rng(0)
        rep = audit_assumptions(zero_spec(), random_probes(zero_spec(), 20, rng))
        assert rep.max_lipschitz_ratio == 0.0 and rep.max_growth_ratio == 0.0 and rep.ok

    def test_mf_ou_lipschitz(self):
        spec = get_problem("mf_ou", kappa=1.0)
        rep = audit_assumptions(spec, random_probes(spec, 1000, np.random.default_rng(1)))
        # |kappa (m(mu) - m(nu)) - kappa (x - y)| <= kappa (|x - y| + W2)
        assert rep.max_lipschitz_ratio <= 1.0
        assert rep.max_lipschitz_ratio <= spec.declared_lipschitz
        assert rep.violations == []

    def test_cubic_payoff_flags_growth(self):
        spec = zero_spec(g=lambda X: X[:, 0] ** 3, growth=10.0)
        probes = [(0.0, [0.0], [0.0]), (0.0, [1.0], [0.0]), (0.0, [100.0], [0.0])]
        rep = audit_assumptions(spec, probes)
        assert not rep.ok
        assert any("growth" in v and "probe 2" in v for v in rep.violations)

    def test_needs_two_probes(self):
        with pytest.raises(ValueError):
            audit_assumptions(zero_spec(), [(0.0, [0.0], [0.0])])

    def test_builtin_battery_respects_declared_constants(self):
        rng = np.random.default_rng(2)
        for name, spec in builtin_library().items():
            rep = audit_assumptions(spec, random_probes(spec, 60, rng))
            assert rep.max_lipschitz_ratio <= spec.declared_lipschitz + 1e-12, name


def test_ensemble_accepts_lists():
    mu = ParticleEnsemble.of([1.0, 3.0])
    assert mu.size == 2 and mu.dim == 1
