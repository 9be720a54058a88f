from __future__ import annotations

import csv
import io
import math
from dataclasses import replace

import numpy as np
import pytest

from condisp.core import RngStream
from condisp.errors import IncompatibleSchemeError
from condisp.simulation import (
    LINEAR_TRUTH,
    LOGISTIC_TRUTH,
    ContaminationScheme,
    StudyConfig,
    apply_contamination,
    binomial_pmf,
    breakdown_curve,
    contaminated_pmf,
    fmt,
    generate_covariates,
    model_for,
    nearest_rows,
    run_study,
    simulate_response,
    to_csv,
    to_markdown,
)

LINEAR = model_for("linear")
LOGIT = model_for("logistic")
BINOM = model_for("binomial")

# Var(X beta) for the design: 1/3 + 1/3 + 1/4 + 2/6 + 4 cov(x1, x3), cov(x1, x3) = (sqrt 8 / 3)(43/384)
SNR_EXACT = 1.25 + 43 * math.sqrt(8) / 288


class TestCovariates:
    x = generate_covariates(100_000, RngStream(0, "cov"))

    def test_binary_column(self):
        assert set(np.unique(self.x[:, 2])) == {0.0, 1.0}

    def test_correlation(self):
        assert np.corrcoef(self.x[:, 0], self.x[:, 1])[0, 1] == pytest.approx(0.5, abs=0.02)

    def test_variance(self):
        assert self.x[:, 0].var() == pytest.approx(1 / 3, abs=0.01)

    def test_regenerated_per_stream(self):
        a = generate_covariates(5, RngStream(0, ("replication", 0)))
        b = generate_covariates(5, RngStream(0, ("replication", 1)))
        assert not np.array_equal(a, b)

    def test_n_positive(self):
        with pytest.raises(ValueError):
            generate_covariates(0, 0)


class TestResponses:
    def test_linear_zero_row_mean(self):
        x = np.zeros((100_000, 3))
        y = simulate_response(LINEAR, LINEAR_TRUTH, x, RngStream(1, "y"))
        assert y.mean() == pytest.approx(1.0, abs=4 / math.sqrt(100_000))

    def test_signal_to_noise_matches_closed_form(self):
        x = generate_covariates(1_000_000, RngStream(2, "snr"))
        assert LINEAR.mean(x, LINEAR_TRUTH).var() == pytest.approx(SNR_EXACT, abs=0.01)

    @pytest.mark.xfail(strict=True, reason="closed-form ratio of the design is 1.672, outside 1.62 +- 0.05")
    def test_signal_to_noise_stated_value(self):
        assert SNR_EXACT == pytest.approx(1.62, abs=0.05)

    def test_logistic_zero_row(self):
        y = simulate_response(LOGIT, LOGISTIC_TRUTH, np.zeros((100_000, 3)), RngStream(3, "y"))
        assert y.mean() == pytest.approx(0.5, abs=0.01)


class TestContamination:
    def test_clean_identity(self):
        x = generate_covariates(31, 0)
        y = np.arange(31.0)
        out, idx = apply_contamination(y, x, ContaminationScheme("uniform", k=0, z=10.0), 0)
        np.testing.assert_array_equal(out, y)
        assert idx.size == 0
        table = binomial_pmf(BINOM, LOGISTIC_TRUTH, x)
        np.testing.assert_array_equal(contaminated_pmf(BINOM, LOGISTIC_TRUTH, x, ContaminationScheme("binomial")), table)

    def test_localized_exact_row(self):
        x = generate_covariates(20, 1)
        x[7, 0] = -0.5
        np.testing.assert_array_equal(nearest_rows(x, 1), [7])
        _, idx = apply_contamination(np.zeros(20), x, ContaminationScheme("localized", k=1, z=5.0))
        np.testing.assert_array_equal(idx, [7])

    def test_uniform_three_residuals(self):
        x = generate_covariates(31, 2)
        y = simulate_response(LINEAR, LINEAR_TRUTH, x, 3)
        out, idx = apply_contamination(y, x, ContaminationScheme("uniform", k=3, z=10.0), RngStream(0, "idx"))
        resid = out - LINEAR.mean(x, LINEAR_TRUTH)
        assert np.sum(np.isclose(resid, 10.0, rtol=0, atol=1e-12)) == 3
        assert idx.size == 3
        untouched = np.setdiff1d(np.arange(31), idx)
        np.testing.assert_array_equal(out[untouched], y[untouched])

    def test_fixed_indices_frozen(self):
        s = ContaminationScheme("uniform", k=5, z=3.0)
        a = s.fixed_indices(31, RngStream(4, "outlier-indices"))
        b = s.fixed_indices(31, RngStream(4, "outlier-indices"))
        np.testing.assert_array_equal(a, b)
        assert len(set(a.tolist())) == 5

    @pytest.mark.parametrize("kwargs", [dict(mode="other"), dict(k=-1), dict(alpha=1.0), dict(alpha=-0.1)])
    def test_invalid_scheme(self, kwargs):
        with pytest.raises(IncompatibleSchemeError):
            ContaminationScheme(**kwargs)

    def test_k_below_n(self):
        with pytest.raises(IncompatibleSchemeError):
            apply_contamination(np.zeros(3), generate_covariates(3, 0), ContaminationScheme("localized", k=3, z=1.0))

    def test_discrete_rejected(self):
        with pytest.raises(IncompatibleSchemeError):
            apply_contamination(np.zeros(5), generate_covariates(5, 0), ContaminationScheme("uniform", k=1, z=1.0),
                                0, model=LOGIT)
        with pytest.raises(IncompatibleSchemeError):
            apply_contamination(np.zeros(5), generate_covariates(5, 0), ContaminationScheme("binomial", alpha=0.1))

    @pytest.mark.parametrize("placement", ["uniform", "localized"])
    def test_mixture_rows_sum_to_one(self, placement):
        x = generate_covariates(30, 5)
        sch = ContaminationScheme("binomial", alpha=0.2, placement=placement)
        table = contaminated_pmf(BINOM, LOGISTIC_TRUTH, x, sch)
        np.testing.assert_allclose(table.sum(axis=1), 1.0, atol=1e-12)
        clean = binomial_pmf(BINOM, LOGISTIC_TRUTH, x)
        changed = np.flatnonzero(np.any(table != clean, axis=1))
        assert changed.size == (30 if placement == "uniform" else 1)


class TestStudy:
    def test_r2_sd_definitional(self):
        s = run_study(StudyConfig(R=2, estimators=("Lik", "NED"), seed=3))
        for tag in ("Lik", "NED"):
            est = s[tag].estimates
            np.testing.assert_allclose(s[tag].sd, np.abs(est[0] - est[1]) / math.sqrt(2), atol=1e-15)

    def test_full_determinism(self):
        cfg = StudyConfig(R=3, estimators=("Lik", "HD.c"), seed=4)
        a = run_study(cfg)
        b = run_study(cfg)
        c = run_study(replace(cfg, n_jobs=2))
        for tag in cfg.estimators:
            np.testing.assert_array_equal(a[tag].estimates, b[tag].estimates)
            np.testing.assert_array_equal(a[tag].estimates, c[tag].estimates)

    def test_estimator_agnostic(self):
        one = run_study(StudyConfig(R=3, estimators=("NED",), seed=5))
        two = run_study(StudyConfig(R=3, estimators=("Lik", "NED", "Hub"), seed=5))
        np.testing.assert_array_equal(one["NED"].estimates, two["NED"].estimates)

    def test_bootstrap_coverage_bounds(self):
        s = run_study(StudyConfig(R=3, B=5, estimators=("Lik",), seed=6))
        cov = s["Lik"].coverage
        assert np.all((cov >= 0) & (cov <= 1))
        assert s["Lik"].corrected.shape == (3, 5)

    def test_logistic_and_binomial(self):
        s = run_study(StudyConfig(model="logistic", n=60, R=2, estimators=("Lik", "NED"), seed=7))
        assert s["NED"].estimates.shape == (2, 4)
        b = run_study(StudyConfig(model="binomial", n=30, R=2, estimators=("Lik", "HD"), seed=7,
                                  contamination=ContaminationScheme("binomial", alpha=0.1)))
        assert b["HD"].estimates.shape == (2, 4)
        sampled = run_study(StudyConfig(model="binomial", n=60, R=2, estimators=("NED",), seed=7, exact=False))
        assert np.all(np.isfinite(sampled["NED"].estimates))

    def test_unknown_tag(self):
        with pytest.raises(ValueError):
            run_study(StudyConfig(R=1, estimators=("KL",)))


class TestBreakdown:
    def test_zero_point_is_clean_study(self):
        cfg = StudyConfig(R=4, estimators=("Lik",), seed=8,
                          contamination=ContaminationScheme("uniform", k=3, z=10.0))
        curve = breakdown_curve(cfg, [0.0])
        clean = run_study(replace(cfg, contamination=ContaminationScheme()))
        got = [r["mean"] for r in curve]
        np.testing.assert_allclose(got, clean["Lik"].mean, atol=0)

    def test_lik_increasing(self):
        cfg = StudyConfig(R=40, estimators=("Lik",), seed=9,
                          contamination=ContaminationScheme("uniform", k=3))
        curve = breakdown_curve(cfg, [3, 5, 10, 15])
        b0 = [r["mean"] for r in curve if r["parameter"] == "beta0"]
        assert np.all(np.diff(b0) > 0)

    def test_long_format_shape(self):
        cfg = StudyConfig(R=2, estimators=("Lik", "Hub"), seed=10,
                          contamination=ContaminationScheme("localized", k=10))
        curve = breakdown_curve(cfg, [3, 5, 10, 15])
        assert len(curve) == 4 * 2 * 5
        assert set(curve[0]) == {"z", "estimator", "parameter", "mean"}


class TestOutput:
    def test_fmt_six_significant(self):
        assert fmt(0.123456789) == "0.123457"
        assert fmt(123456789.0) == "1.23457e+08"
        assert fmt(7) == "7"

    def test_csv_round_trip(self):
        s = run_study(StudyConfig(R=3, estimators=("Lik", "NED"), seed=11))
        recs = s.to_records()
        rows = list(csv.DictReader(io.StringIO(to_csv(recs))))
        assert len(rows) == len(recs) == 10
        for r, rec in zip(rows, recs):
            assert float(r["mean"]) == pytest.approx(rec["mean"], rel=5e-6, abs=1e-300)
            assert fmt(float(r["mean"])) == r["mean"]

    def test_markdown_rows(self):
        s = run_study(StudyConfig(R=2, estimators=("Lik", "NED"), seed=12))
        md = to_markdown(s).splitlines()
        assert len(md) == 4
        assert md[0].split("|")[2].strip() == "log_sigma"
        assert md[2].split("|")[1].strip() == "Lik"
