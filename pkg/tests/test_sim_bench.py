import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lcsfilter.covariance import KernelFamily, KernelSpec, cov_matrix
from lcsfilter.sim_bench import (
    COVARIATES,
    ObsCoefficients,
    ScenarioConfig,
    aggregate,
    compute_metrics,
    measurement_error_diagnostics,
    metrics_rows,
    pointsource_field,
    run_replicate,
    run_scenario,
    simulate_covariates,
    simulate_gp_truth,
    simulate_lowcost,
    simulate_pointsource_truth,
)

EXP = KernelFamily.EXPONENTIAL
TINY = dict(n_replicates=2, n_train=120, n_test=6, n_lowcost=8)


class TestCovariates:
    def test_ranges(self):
        z = simulate_covariates(20000, seed=1)
        assert z.shape == (20000, 4)
        assert z[:, 0].min() >= 24 and z[:, 0].max() <= 76
        assert z[:, 1].min() >= 17 and z[:, 1].max() <= 45
        assert set(np.unique(z[:, 2])) == {0.0, 1.0}
        assert set(np.unique(z[:, 3])) == {0.0, 1.0}

    def test_bernoulli_means(self):
        n = 100_000
        z = simulate_covariates(n, seed=2)
        for col, p in ((2, 2 / 7), (3, 2 / 3)):
            assert abs(z[:, col].mean() - p) < 3 * math.sqrt(p * (1 - p) / n)

    def test_seeded(self):
        np.testing.assert_array_equal(simulate_covariates(50, 3), simulate_covariates(50, 3))


class TestGpTruth:
    LOCS = np.array([[0.1, 0.2], [0.4, 0.3], [0.9, 0.8]])

    def test_zero_variance(self):
        x = simulate_gp_truth(self.LOCS, KernelSpec(EXP, 1e-14, 2.0), 7.0, 5, seed=0)
        np.testing.assert_allclose(x, 7.0, atol=1e-5)

    def test_sample_covariance(self):
        spec = KernelSpec(EXP, 15.0, 3 / math.sqrt(2))
        x = simulate_gp_truth(self.LOCS, spec, 7.0, 100_000, seed=1)
        c = cov_matrix(spec, self.LOCS)
        emp = np.cov(x, rowvar=False)
        # sd of a sample covariance is sqrt((c_ij^2 + c_ii c_jj) / n)
        se = np.sqrt((c ** 2 + np.outer(np.diag(c), np.diag(c))) / 100_000)
        assert np.all(np.abs(emp - c) < 4 * se)
        assert np.all(np.abs(x.mean(axis=0) - 7.0) < 4 * np.sqrt(np.diag(c) / 100_000))

    def test_seeded(self):
        spec = KernelSpec(EXP, 5.0, 2.0)
        np.testing.assert_array_equal(simulate_gp_truth(self.LOCS, spec, 7, 4, 9),
                                      simulate_gp_truth(self.LOCS, spec, 7, 4, 9))


class TestPointSource:
    def test_value_at_source(self):
        val = pointsource_field([[0.3, 0.6]], [[0.3, 0.6]], [[4.5]], 0.4)
        assert val[0, 0] == 4.5

    @given(st.sampled_from([0.1, 0.4, 0.7, 1.0]), st.integers(0, 10_000))
    def test_bounds(self, gamma, seed):
        locs = np.random.default_rng(seed).uniform(0, 1, (20, 2))
        x, sources = simulate_pointsource_truth(locs, gamma, 30, seed)
        assert sources.shape == (2, 2)
        assert np.all(x > 0) and np.all(x <= 18)

    def test_decay(self):
        d, p, gamma = 0.37, 6.0, 0.7
        val = pointsource_field([[d, 0.0]], [[0.0, 0.0]], [[p]], gamma)[0, 0]
        assert val == pytest.approx(p * math.exp(-d * d / (2 * gamma)), rel=1e-14)

    def test_gamma_must_be_positive(self):
        with pytest.raises(ValueError):
            simulate_pointsource_truth([[0, 0]], 0.0, 1)


class TestLowcost:
    def test_noise_free_is_deterministic(self, rng):
        x = rng.normal(7, 3, (5, 4))
        z = simulate_covariates(20, 0).reshape(5, 4, 4)
        coef = ObsCoefficients()
        a = simulate_lowcost(x, z, coef, 0.0, seed=1)
        b = simulate_lowcost(x, z, coef, 0.0, seed=2)
        np.testing.assert_array_equal(a, b)
        fit = coef.as_fit(0.0)
        np.testing.assert_allclose(a.ravel(), fit.offset(z.reshape(20, 4)) + fit.gain(z.reshape(20, 4)) * x.ravel())

    def test_residual_variance(self, rng):
        n = 100_000
        x = rng.normal(7, 3, n)
        z = simulate_covariates(n, 1)
        coef = ObsCoefficients()
        resid = simulate_lowcost(x, z, coef, 2.0, seed=2) - simulate_lowcost(x, z, coef, 0.0)
        assert abs(resid.var() - 2.0) < 4 * 2.0 * math.sqrt(2 / n)

    def test_identity_coefficients(self, rng):
        x = rng.normal(7, 3, 1000)
        z = simulate_covariates(1000, 1)
        ident = ObsCoefficients(0.0, 1.0, (0, 0, 0, 0), (0, 0, 0, 0))
        y = simulate_lowcost(x, z, ident, 0.5, seed=3)
        np.testing.assert_allclose(y - x, np.random.default_rng(3).normal(0, math.sqrt(0.5), 1000))

    def test_without_covariates(self, rng):
        x = rng.normal(7, 3, 10)
        coef = ObsCoefficients()
        fit = coef.as_fit(0.0, with_covariates=False)
        y = simulate_lowcost(x, None, coef, 0.0, with_covariates=False)
        np.testing.assert_allclose(y, fit.beta0 + fit.beta1 * x)


class TestMetrics:
    def test_perfect(self):
        r = compute_metrics([5, 13, 20], [5, 13, 20])
        assert r.rmse_overall == 0 and r.fnr == 0 and r.rmse_moderate == 0
        assert r.residual_truth_correlation is None

    def test_fnr_example(self):
        assert compute_metrics([10, 11], [10, 15]).fnr == 1.0

    def test_four_point_oracle(self):
        truth = [8.0, 12.0, 14.0, 20.0]
        pred = [9.0, 11.5, 12.5, 17.0]
        lo = [7.0, 10.0, 11.0, 15.0]
        hi = [11.0, 13.0, 13.0, 21.0]
        r = compute_metrics(pred, truth, lower=lo, upper=hi)
        # errors 1, -0.5, -1.5, -3
        assert r.rmse_overall == pytest.approx(math.sqrt((1 + 0.25 + 2.25 + 9) / 4))
        assert r.rmse_moderate == pytest.approx(math.sqrt((2.25 + 9) / 2))  # truth > 12
        assert r.fnr == pytest.approx(1 / 3)  # 12 -> 11.5 missed; 14, 20 hit
        assert r.coverage95 == pytest.approx(3 / 4)  # 14 lies outside [11, 13]
        assert r.ci_width_mean == pytest.approx((4 + 3 + 2 + 6) / 4)
        e = np.array(pred) - truth
        t = np.array(truth)
        corr = np.sum((e - e.mean()) * (t - t.mean())) / math.sqrt(np.sum((e - e.mean()) ** 2) * np.sum((t - t.mean()) ** 2))
        assert r.residual_truth_correlation == pytest.approx(corr)

    def test_absent_when_no_moderate(self):
        r = compute_metrics([1, 2], [3, 4])
        assert r.fnr is None and r.rmse_moderate is None and r.coverage95 is None

    def test_distance_bins(self):
        r = compute_metrics([1, 2, 3], [1, 1, 1], distance=[0.05, 0.05, 0.25])
        first, _, third = r.rmse_by_distance[:3]
        assert first[2] == pytest.approx(math.sqrt(0.5)) and first[3] == 2
        assert third[2] == pytest.approx(2.0) and third[3] == 1

    @given(st.lists(st.tuples(st.floats(0, 40), st.floats(0, 40)), min_size=1, max_size=40))
    def test_ranges(self, pairs):
        pred, truth = np.array(pairs).T
        r = compute_metrics(pred, truth, lower=pred - 1, upper=pred + 1)
        assert r.rmse_overall >= 0
        assert r.fnr is None or 0 <= r.fnr <= 1
        assert 0 <= r.coverage95 <= 1

    def test_aggregate_mc_se(self):
        reps = [compute_metrics([v], [0.0]) for v in (1.0, 2.0, 4.0)]
        agg = aggregate(reps)["rmse_overall"]
        assert agg.value == pytest.approx(7 / 3)
        assert agg.mc_se == pytest.approx(np.std([1, 2, 4], ddof=1) / math.sqrt(3))
        assert aggregate(reps)["fnr"].value is None


class TestScenario:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            ScenarioConfig(n_lowcost=0)
        with pytest.raises(ValueError):
            ScenarioConfig(tau2=-1)
        with pytest.raises(ValueError):
            ScenarioConfig.profile("huge")

    def test_profiles(self):
        desk = ScenarioConfig.profile("desk")
        assert (desk.n_replicates, desk.n_train, desk.n_test) == (10, 500, 50)
        assert ScenarioConfig.profile("desk", scenario="2_under").covariates_fit is False
        assert ScenarioConfig.profile("desk", scenario="1b_refs").n_collocated == 5

    def test_replicate_determinism(self):
        cfg = ScenarioConfig(seed=3, **TINY)
        a = run_replicate(cfg, 1, ("regcal", "inverse", "gpfilter"))
        b = run_replicate(cfg, 1, ("regcal", "inverse", "gpfilter"))
        for m in a:
            assert a[m].scalars() | {"runtime": 0} == b[m].scalars() | {"runtime": 0}
        c = run_replicate(cfg, 0, ("regcal",))
        assert c["regcal"].rmse_overall != a["regcal"].rmse_overall

    def test_run_scenario_smoke(self):
        cfg = ScenarioConfig(seed=1, **TINY)
        res = run_scenario(cfg, ("regcal", "inverse", "gpfilter"), keep_predictions=True)
        assert set(res.metrics) == {"regcal", "inverse", "gpfilter"}
        assert res.metrics["gpfilter"]["rmse_overall"].n_replicates == 2
        assert res.generating_fit.schema.names == COVARIATES
        assert res.generating_fit.beta1 == ObsCoefficients().beta1
        assert len(res.predictions) == 2 * 3 * cfg.n_test * cfg.n_lowcost
        assert {row[0] for row in res.predictions} == {0, 1}
        rows = metrics_rows(res)
        assert {"scenario", "method", "metric", "value", "mc_se"} <= set(rows[0])

    def test_threads_match_serial(self):
        cfg = ScenarioConfig(seed=2, **TINY)
        one = run_scenario(cfg, ("regcal", "gpfilter"))
        two = run_scenario(cfg, ("regcal", "gpfilter"), threads=2)
        for m in one.metrics:
            for k in ("rmse_overall", "fnr", "coverage95"):
                assert one.metrics[m][k].value == two.metrics[m][k].value

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            run_scenario(ScenarioConfig(**TINY), ("magic",))

    def test_scenario_1b_labels(self):
        cfg = ScenarioConfig.profile("smoke", scenario="1b_sensors", n_lowcost=60, n_replicates=1)
        res = run_scenario(cfg, ("regcal", "gpfilter"))
        assert {"gpfilter[base]", "gpfilter[expanded]", "regcal[base]"} <= set(res.metrics)
        assert math.isfinite(res.pct_change("gpfilter"))

    def test_pointsource_scenario_direction(self):
        cfg = ScenarioConfig.profile("smoke", scenario="3", gamma=0.4, n_replicates=3, seed=5)
        res = run_scenario(cfg, ("regcal", "gpfilter"))
        assert res.value("gpfilter", "rmse_overall") < res.value("regcal", "rmse_overall")


def test_measurement_error_correlations():
    d = measurement_error_diagnostics(n=10_000, seed=0)
    assert d["regcal_corr"] < -0.1
    assert abs(d["inverse_corr"]) < 0.05
