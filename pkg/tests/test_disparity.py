from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import stats

from condisp.core import CovariatePartition, Dataset, RngStream
from condisp.disparity import (
    HD,
    NED,
    DisparityObjective,
    DisparitySpec,
    TabulatedDensity,
    c_derivatives,
    c_function,
    centered_terms,
    discrete_terms,
    exact_discrete_disparity,
    importance_terms,
    pointwise_disparity,
    residual_adjustment,
    tail_constant,
    total_disparity,
)
from condisp.errors import ValidationError
from condisp.kernels import BandwidthSet, fit_density
from condisp.models import ModelSpec, log_density

LOGIT = ModelSpec.logistic(columns=())


class TestCFunction:
    def test_values(self):
        assert c_function(NED, 0.0) == 0.0
        assert c_function(HD, 0.0) == -1.0
        assert c_function(HD, 3.0) == pytest.approx(0.0, abs=1e-15)
        assert c_function(NED, -1.0) == pytest.approx(1.7182818285, abs=1e-10)

    def test_domain(self):
        with pytest.raises(ValueError):
            c_function(NED, -1.5)

    @pytest.mark.parametrize("kind", [HD, NED])
    def test_convex(self, kind):
        rng = np.random.default_rng(0)
        d1 = rng.uniform(-1, 20, 200)
        d2 = rng.uniform(-1, 20, 200)
        lam = rng.random(200)
        lhs = c_function(kind, lam * d1 + (1 - lam) * d2)
        rhs = lam * c_function(kind, d1) + (1 - lam) * c_function(kind, d2)
        assert np.all(lhs <= rhs + 1e-12)

    def test_hd_minimum_at_zero(self):
        grid = np.linspace(-0.999, 50, 5001)
        grid = grid[np.abs(grid) > 1e-9]
        assert np.all(c_function(HD, grid) > c_function(HD, 0.0))

    @pytest.mark.parametrize("kind", [HD, NED])
    def test_centered_minimum_at_zero(self, kind):
        # C(d) - C'(0) d has its strict minimum at 0; e^{-d} - 1 itself is decreasing
        grid = np.linspace(-0.999, 50, 5001)
        grid = grid[np.abs(grid) > 1e-9]
        _, c1, _ = c_derivatives(kind, 0.0)
        assert np.all(c_function(kind, grid) - c1 * grid > c_function(kind, 0.0))

    @pytest.mark.parametrize("kind", [HD, NED])
    def test_derivatives(self, kind):
        d = np.linspace(-0.9, 5, 30)
        h = 1e-5
        _, c1, c2 = c_derivatives(kind, d)
        np.testing.assert_allclose(c1, (c_function(kind, d + h) - c_function(kind, d - h)) / (2 * h), atol=1e-7)
        _, c1p, _ = c_derivatives(kind, d + h)
        _, c1m, _ = c_derivatives(kind, d - h)
        np.testing.assert_allclose(c2, (c1p - c1m) / (2 * h), atol=1e-6)


class TestResidualAdjustment:
    def test_ned_at_one(self):
        a1, a2, a3 = residual_adjustment(NED, 1.0)
        assert a2 == pytest.approx(1.0)
        assert a3 == pytest.approx(1.0)
        assert a1 == pytest.approx(-1.0)

    def test_hd_a3_at_four(self):
        _, _, a3 = residual_adjustment(HD, 4.0)
        assert a3 == pytest.approx(1.0)

    def test_positive_ratio_required(self):
        with pytest.raises(ValueError):
            residual_adjustment(HD, 0.0)


class TestDiscrete:
    f = np.array([0.5, 0.5])
    phi = np.array([0.25, 0.75])

    def test_hd_example(self):
        assert discrete_terms(HD, self.f, self.phi).sum() == pytest.approx(-0.9318516, abs=1e-7)

    def test_ned_example(self):
        expect = 0.25 * (math.exp(-1) - 1) + 0.75 * (math.exp(1 / 3) - 1)
        assert discrete_terms(NED, self.f, self.phi).sum() == pytest.approx(expect, abs=1e-14)
        assert expect == pytest.approx(0.1386807, abs=1e-5)

    def test_hd_identity(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            f = rng.dirichlet(np.ones(6))
            phi = rng.dirichlet(np.ones(6))
            d = discrete_terms(HD, f, phi).sum()
            assert d == pytest.approx(2 - 2 * np.sum(np.sqrt(f * phi)) - 1, abs=1e-12)
            assert d == pytest.approx(np.sum((np.sqrt(f) - np.sqrt(phi)) ** 2) - 1, abs=1e-12)

    @pytest.mark.parametrize("kind", [HD, NED])
    def test_centered_same_total(self, kind):
        rng = np.random.default_rng(2)
        f = rng.dirichlet(np.ones(5))
        phi = rng.dirichlet(np.ones(5))
        assert centered_terms(kind, f, phi).sum() == pytest.approx(discrete_terms(kind, f, phi).sum(), abs=1e-12)
        assert np.all(centered_terms(kind, f, phi) >= c_function(kind, 0.0) * phi - 1e-15)

    def test_tail_constant(self):
        assert tail_constant(NED) == pytest.approx(math.e - 2)
        assert tail_constant(HD) == pytest.approx(0.0)

    @pytest.mark.parametrize("kind,expect", [(NED, 0.0), (HD, -1.0)])
    def test_model_matches_itself(self, kind, expect):
        theta = np.array([0.3])
        p = 1 / (1 + math.exp(-0.3))
        table = TabulatedDensity([[1 - p, p]])
        val = pointwise_disparity(DisparitySpec(kind), table, LOGIT, theta, np.zeros(1))
        assert val == pytest.approx(expect, abs=1e-12)

    def test_pointwise_example(self):
        # f = (0.5, 0.5) against phi = (0.25, 0.75) from a logistic model
        theta = np.array([math.log(3.0)])
        val = pointwise_disparity(DisparitySpec(HD), TabulatedDensity([[0.5, 0.5]]), LOGIT, theta, np.zeros(1))
        assert val == pytest.approx(-0.9318516, abs=1e-7)

    def test_exact_match_minimisation(self):
        model = ModelSpec.logistic()
        x = np.array([[-1.0], [-0.3], [0.4], [1.2]])
        theta0 = np.array([0.2, -0.7])
        p = 1 / (1 + np.exp(-(theta0[0] + theta0[1] * x[:, 0])))
        table = np.column_stack([1 - p, p])
        obj = DisparityObjective(DisparitySpec(HD), TabulatedDensity(table), model, None, x_eval=x)
        g0 = np.linspace(-1, 1, 81)
        g1 = np.linspace(-2, 1, 121)
        vals = np.array([[obj(np.array([a, b])) for b in g1] for a in g0])
        i, j = np.unravel_index(np.argmin(vals), vals.shape)
        assert abs(g0[i] - theta0[0]) <= 0.0125 + 1e-12
        assert abs(g1[j] - theta0[1]) <= 0.0125 + 1e-12

    def test_exact_discrete_matches_objective(self):
        model = ModelSpec.binomial(8)
        x = np.array([[0.1], [0.5]])
        rng = np.random.default_rng(3)
        table = rng.dirichlet(np.ones(9), size=2)
        theta = np.array([0.1, 0.4])
        obj = DisparityObjective(DisparitySpec(NED), TabulatedDensity(table), model, None, x_eval=x)
        np.testing.assert_allclose(obj.pointwise(theta), exact_discrete_disparity(NED, table, model, theta, x),
                                   atol=1e-12)


def gaussian_data(n=30, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, size=(n, 1))
    return Dataset(y_cont=1 + x[:, 0] + rng.normal(size=n), x_cont=x)


class TestContinuous:
    def test_importance_terms_unbiased(self):
        # f = N(0.3, 1.2^2), phi = N(0, 1); quadrature of C(f/phi - 1) phi as oracle
        grid = np.linspace(-15, 15, 60001)
        f = stats.norm.pdf(grid, 0.3, 1.2)
        phi = stats.norm.pdf(grid)
        draws = np.random.default_rng(4).normal(0.3, 1.2, 400_000)
        lr = stats.norm.logpdf(draws, 0.3, 1.2) - stats.norm.logpdf(draws)
        for kind in (HD, NED):
            exact = np.trapezoid(discrete_terms(kind, f, phi), grid)
            terms = importance_terms(kind, lr)
            assert abs(terms.mean() - exact) < 4 * terms.std() / math.sqrt(draws.size)

    def test_ned_importance_terms_bounded_below(self):
        lr = np.linspace(-30, 800, 2001)
        terms = importance_terms(NED, lr)
        assert np.all(np.isfinite(terms))
        assert np.all(terms >= -1e-12)

    def test_hd_importance_terms_literal(self):
        lr = np.linspace(-5, 5, 101)
        r = np.exp(lr)
        np.testing.assert_allclose(importance_terms(HD, lr), c_function(HD, r - 1) / r, atol=1e-12)

    def test_ned_lower_bound(self):
        rng = np.random.default_rng(5)
        model = ModelSpec.gaussian()
        for i in range(100):
            ds = gaussian_data(n=int(rng.integers(5, 20)), seed=i)
            est = fit_density(ds, CovariatePartition.joint(1), BandwidthSet(0.5, 0.5, float(rng.uniform(0.05, 2))))
            theta = rng.normal(scale=2, size=3)
            val = total_disparity(DisparitySpec(NED, mc_points=21), est, model, theta, ds, rng=RngStream(i))
            assert val >= -1e-9

    def test_single_observation_aggregations(self):
        ds = gaussian_data(n=1)
        est = fit_density(ds, CovariatePartition.uncentered(1), BandwidthSet(1.0, 1.0, 0.5))
        model = ModelSpec.gaussian()
        theta = np.array([0.5, 1.0, 0.0])
        for agg in ("average", "integrate"):
            spec = DisparitySpec(NED, aggregation=agg)
            d = total_disparity(spec, est, model, theta, ds, rng=RngStream(9))
            p = pointwise_disparity(spec, est, model, theta, ds.covariates[0], rng=RngStream(9))
            assert d == pytest.approx(p, rel=1e-12)

    def test_frozen_draws(self):
        ds = gaussian_data()
        est = fit_density(ds, CovariatePartition.joint(1), BandwidthSet(0.5, 0.5, 0.4))
        obj = DisparityObjective(DisparitySpec(HD), est, ModelSpec.gaussian(), ds, rng=RngStream(1))
        before = obj.draws.copy()
        a = obj(np.array([1.0, 1.0, 0.0]))
        obj(np.array([0.0, 2.0, 0.5]))
        np.testing.assert_array_equal(obj.draws, before)
        assert obj(np.array([1.0, 1.0, 0.0])) == a
        twin = DisparityObjective(DisparitySpec(HD), est, ModelSpec.gaussian(), ds, rng=RngStream(1))
        np.testing.assert_array_equal(twin.draws, before)

    def test_integrate_aggregation_runs(self):
        ds = gaussian_data()
        est = fit_density(ds, CovariatePartition.joint(1), BandwidthSet(0.5, 0.5, 0.4))
        spec = DisparitySpec(NED, aggregation="integrate")
        val = total_disparity(spec, est, ModelSpec.gaussian(), np.array([1.0, 1.0, 0.0]), ds, rng=RngStream(2))
        assert np.isfinite(val) and val >= 0


class TestDuplicates:
    def test_duplicated_rows_discrete(self):
        rng = np.random.default_rng(6)
        n = 25
        x = rng.uniform(-1, 1, size=(n, 1))
        y = (rng.random(n) < 0.5).astype(float)
        ds = Dataset(y_disc=y, x_cont=x)
        dup = Dataset(y_disc=np.repeat(y, 2), x_cont=np.repeat(x, 2, axis=0))
        bw = BandwidthSet(1.0, 0.4, 1.0)
        model = ModelSpec.logistic()
        theta = np.array([0.1, 0.3])
        spec = DisparitySpec(HD)
        a = total_disparity(spec, fit_density(ds, CovariatePartition.uncentered(1), bw), model, theta, ds)
        b = total_disparity(spec, fit_density(dup, CovariatePartition.uncentered(1), bw), model, theta, dup)
        assert a == pytest.approx(b, abs=1e-12)


class TestSpec:
    def test_validation(self):
        with pytest.raises(ValidationError):
            DisparitySpec(NED, mc_points=0)
        with pytest.raises(ValidationError):
            DisparitySpec(NED, aggregation="median")
        with pytest.raises(ValueError):
            DisparitySpec("KL")

    def test_lowercase_kind(self):
        assert DisparitySpec("ned").kind == NED

    def test_model_density_consistency(self):
        # the Gaussian objective uses the same density as the model module
        theta = np.array([0.2, 0.3, 0.1])
        x = np.array([[0.5]])
        from condisp.models import gaussian_log_density_grid

        eta = ModelSpec.gaussian().design(x) @ theta[:2]
        y = np.array([[0.1, 0.9]])
        np.testing.assert_allclose(
            gaussian_log_density_grid(eta, theta[2], y)[0],
            log_density(ModelSpec.gaussian(), theta, y[0], np.repeat(x, 2, axis=0)),
        )
