from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.stats import binom

from condisp.core import Dataset, RngStream
from condisp.disparity import DisparityObjective, DisparitySpec
from condisp.errors import NonFiniteObjectiveError, OptimizerDivergedError, SingularDesignError
from condisp.estimators import (
    EstimatorTag,
    MarginalObjective,
    OptimizerOptions,
    fit_estimator,
    fit_huber,
    fit_mle,
    fit_tabulated,
    golden_section,
    nelder_mead,
)
from condisp.models import ModelSpec, mle_fit
from condisp.simulation import LINEAR_TRUTH, generate_covariates, model_for, simulate_response, to_dataset

GAUSS = ModelSpec.gaussian()


def linear_data(n=31, seed=0):
    x = generate_covariates(n, RngStream(seed, "x"))
    y = simulate_response(GAUSS, LINEAR_TRUTH, x, RngStream(seed, "y"))
    return to_dataset(x, y, GAUSS)


class TestNelderMead:
    def test_quadratic_bowl(self):
        res = nelder_mead(lambda t: float(np.sum((t - np.array([1.0, 2.0])) ** 2)), np.zeros(2))
        assert res.converged
        np.testing.assert_allclose(res.x, [1.0, 2.0], atol=1e-5)

    def test_rosenbrock(self):
        def rosen(t):
            return 100.0 * (t[1] - t[0] ** 2) ** 2 + (1.0 - t[0]) ** 2

        res = nelder_mead(rosen, np.array([-1.2, 1.0]))
        assert res.iterations <= 2000
        assert res.value < 1e-6
        np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-2)

    def test_constant_objective(self):
        init = np.array([0.3, -0.4, 2.0])
        res = nelder_mead(lambda t: 5.0, init)
        assert res.converged
        np.testing.assert_array_equal(res.x, init)

    def test_trace_non_increasing(self):
        res = nelder_mead(lambda t: float(np.sum(np.abs(t - 0.7) ** 1.5)), np.zeros(3))
        assert np.all(np.diff(res.trace) <= 0)

    def test_nonfinite_init(self):
        with pytest.raises(NonFiniteObjectiveError):
            nelder_mead(lambda t: math.nan, np.zeros(2))

    def test_divergence(self):
        with pytest.raises(OptimizerDivergedError):
            nelder_mead(lambda t: -float(t[0]), np.zeros(1), OptimizerOptions(max_iter=10_000))

    def test_iteration_cap(self):
        def rosen(t):
            return 100.0 * (t[1] - t[0] ** 2) ** 2 + (1.0 - t[0]) ** 2

        res = nelder_mead(rosen, np.array([-1.2, 1.0]), OptimizerOptions(max_iter=5))
        assert not res.converged
        assert res.iterations == 5

    def test_converged_means_small_simplex(self):
        res = nelder_mead(lambda t: float(np.sum(t * t)), np.ones(2))
        assert res.converged
        assert np.max(np.abs(res.x)) < 1e-5


def test_golden_section():
    x, fx = golden_section(lambda t: (t - 0.3) ** 2 + 1.0, -2.0, 2.0, tol=1e-9)
    assert x == pytest.approx(0.3, abs=1e-6)
    assert fx == pytest.approx(1.0)


class TestTags:
    @pytest.mark.parametrize("tag,density", [
        ("Lik", "mle"), ("LR", "mle"), ("MLE", "mle"), ("Hub", "huber"), ("Huber", "huber"),
        ("HD", "uncentered"), ("NED.c", "joint"), ("HD.h", "homoscedastic"), ("NED.m", "marginal"),
    ])
    def test_parse(self, tag, density):
        assert EstimatorTag.parse(tag).density == density

    def test_unknown(self):
        with pytest.raises(ValueError):
            EstimatorTag.parse("KL.c")


class TestHuber:
    def test_close_to_ols_on_clean_data(self):
        ds = linear_data(500, seed=1)
        hub = fit_huber(ds, GAUSS).theta[:4]
        ols = fit_mle(ds, GAUSS).theta[:4]
        assert np.max(np.abs(hub - ols)) < 0.05

    def test_resists_gross_outlier(self):
        ds = linear_data(31, seed=3)
        y = ds.y_cont[:, 0].copy()
        y[5] = 1e6
        bad = ds.with_responses(y_cont=y[:, None])
        assert abs(fit_huber(bad, GAUSS).theta[0] - 1.0) < 0.5
        assert abs(fit_mle(bad, GAUSS).theta[0] - 1.0) > 5.0

    def test_exact_interpolation(self):
        ds = linear_data(20, seed=2)
        y = GAUSS.design(ds.covariates) @ LINEAR_TRUTH[:4]
        exact = ds.with_responses(y_cont=y[:, None])
        np.testing.assert_allclose(fit_huber(exact, GAUSS).theta[:4], LINEAR_TRUTH[:4], atol=1e-9)
        np.testing.assert_allclose(fit_mle(exact, GAUSS).theta[:4], LINEAR_TRUTH[:4], atol=1e-9)

    def test_singular_design(self):
        ds = linear_data(20, seed=2)
        x = ds.covariates.copy()
        x[:, 1] = x[:, 0]
        bad = to_dataset(x, ds.y_cont[:, 0], GAUSS)
        with pytest.raises(SingularDesignError):
            fit_huber(bad, GAUSS)

    def test_discrete_rejected(self):
        with pytest.raises(ValueError):
            fit_huber(linear_data(), ModelSpec.logistic())


class TestDiscreteExactMatch:
    def test_tabulated_model_pmf_recovers_theta(self):
        model = ModelSpec.binomial(8)
        x = generate_covariates(40, RngStream(4, "x"))
        theta = np.array([0.1, 0.5, -0.4, 0.3])
        p = model.mean(x, theta) / 8
        table = binom.pmf(np.arange(9)[None, :], 8, p[:, None])
        for tag in ("HD", "NED", "Lik"):
            np.testing.assert_allclose(fit_tabulated(tag, x, table, model).theta, theta, atol=1e-4)

    def test_kernel_frequencies_at_model(self):
        # responses repeated in model proportions per covariate level make the frequencies exact
        model = ModelSpec.logistic(columns=(0,))
        x = np.repeat([0.0, 1.0], 8)
        y = np.array([0] * 4 + [1] * 4 + [0] * 2 + [1] * 6, dtype=float)
        ds = Dataset(y_cont=None, x_cont=None, x_disc=x, y_disc=y)
        theta = np.array([0.0, math.log(3.0)])
        for tag in ("HD", "NED"):
            fit = fit_estimator(tag, ds, model)
            np.testing.assert_allclose(fit.theta, theta, atol=1e-4)


class TestLocalOptimality:
    @pytest.mark.parametrize("tag", ["NED", "HD.c"])
    def test_probe(self, tag):
        ds = linear_data(31, seed=5)
        fit = fit_estimator(tag, ds, GAUSS, rng=RngStream(5, "probe"))
        # a fresh stream with the same key reproduces the frozen draws
        obj = DisparityObjective(DisparitySpec(EstimatorTag.parse(tag).kind), fit.density, GAUSS, ds,
                                 rng=RngStream(5, "probe"))
        best = obj(fit.theta)
        assert best == pytest.approx(fit.objective, abs=1e-12)
        assert best <= obj(mle_fit(GAUSS, ds))
        gen = np.random.default_rng(0)
        for _ in range(50):
            u = gen.standard_normal(fit.theta.size)
            assert best <= obj(fit.theta + 0.1 * u / np.linalg.norm(u)) + 1e-12

    def test_marginal_beats_init(self):
        ds = linear_data(31, seed=6)
        fit = fit_estimator("NED.m", ds, GAUSS)
        assert fit.converged
        obj = MarginalObjective("NED", ds, GAUSS, fit.bandwidths)
        at_init, _ = obj.profile(mle_fit(GAUSS, ds)[:-1])
        assert fit.objective <= at_init + 1e-12


class TestDeterminism:
    @pytest.mark.parametrize("tag", ["HD", "NED.c", "HD.h", "NED.m", "Hub"])
    def test_bit_identical(self, tag):
        ds = linear_data(31, seed=7)
        a = fit_estimator(tag, ds, GAUSS, rng=RngStream(9, tag)).theta
        b = fit_estimator(tag, ds, GAUSS, rng=RngStream(9, tag)).theta
        np.testing.assert_array_equal(a, b)

    def test_trace_non_increasing(self):
        fit = fit_estimator("NED", linear_data(31, seed=8), GAUSS)
        assert np.all(np.diff(fit.trace) <= 0)


def test_consistency_ned():
    model = model_for("linear")

    def median_error(n):
        errs = []
        for s in range(20):
            ds = linear_data(n, seed=100 + s)
            theta = fit_estimator("NED", ds, model, rng=RngStream(s, "mc")).theta
            errs.append(np.linalg.norm(theta - LINEAR_TRUTH))
        return np.median(errs)

    assert median_error(400) < median_error(50)
