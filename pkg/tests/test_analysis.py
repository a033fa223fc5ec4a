"""Statistics layer tests with synthetic oracles and small ensembles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from emcds import analysis as an
from emcds import engine as eg
from emcds import schedules as sch
from emcds.model import builtin_testfn, ornstein_uhlenbeck, shifted_sine
from emcds.poisson import solve_poisson, stationary_density

IDENT = builtin_testfn("identity")
WITCH = builtin_testfn("witch")


def _phi_linear(x):
    return -np.asarray(x, dtype=np.float64)


def _dphi_linear(x):
    return -np.ones_like(np.asarray(x, dtype=np.float64))


def _d2phi_linear(x):
    return np.zeros_like(np.asarray(x, dtype=np.float64))


def _linear_diag_records(schedule, n, n_chains=8, seed=17):
    ou = ornstein_uhlenbeck(math.sqrt(2.0))
    cfg = eg.EnsembleConfig(ou, schedule, n_chains, n, seed,
                            init=eg.Fixed(0.0),
                            recorders=(eg.PhiDiagnostics(
                                IDENT, _phi_linear, _dphi_linear,
                                _d2phi_linear),))
    return eg.run_ensemble(cfg)


class TestCltStatistic:
    def test_centered_sum_gives_zero(self):
        assert an.clt_statistic(5 * 0.3, 5, 12.0, 0.3) == 0.0

    def test_unit_steps_reduce_to_root_n_scaling(self):
        # T_n = n for unit steps, so the statistic is the classical one
        vals = np.array([1.0, -0.5, 2.0, 0.25])
        n = vals.size
        out = an.clt_statistic(vals.sum(), n, float(n), 0.1)
        assert out == pytest.approx((vals.sum() - n * 0.1) / math.sqrt(n))

    def test_vectorized_over_chains(self):
        sums = np.array([1.0, 2.0, 3.0])
        out = an.clt_statistic(sums, 2, 4.0, 0.5)
        assert np.allclose(out, (sums - 1.0) / 2.0)

    def test_nonpositive_T_rejected(self):
        with pytest.raises(ValueError):
            an.clt_statistic(1.0, 1, 0.0, 0.0)

    def test_report_counts_diverged_chains(self):
        rng = np.random.default_rng(0)
        sums = rng.normal(0.0, 1.0, 43)
        sums[[3, 17, 40]] = np.nan
        rep = an.clt_report(sums, 10, 1.0, 0.0, 1.0)
        assert rep.n_chains == 43
        assert rep.n_diverged == 3
        assert rep.samples.size == 40


class TestKsTestNormal:
    def test_point_mass_against_unit_normal(self):
        d, p = an.ks_test_normal(np.zeros(100), 1.0)
        assert d == pytest.approx(0.5)
        assert p < 1e-10

    def test_minimum_sample_count(self):
        with pytest.raises(ValueError, match="30"):
            an.ks_test_normal(np.zeros(29), 1.0)

    def test_nonpositive_variance_with_spread_samples(self):
        with pytest.raises(ValueError, match="variance"):
            an.ks_test_normal(np.array([0.0, 1.0] * 20), 0.0)

    def test_degenerate_target_point_mass_agreement(self):
        assert an.ks_test_normal(np.zeros(50), 0.0) == (0.0, 1.0)
        assert an.ks_test_normal(np.full(50, 2.0), 0.0) == (1.0, 0.0)

    def test_self_calibration_of_p_values(self):
        # drawing from the null, the rejection fraction at 5% should sit
        # near 5%: over 200 repetitions it stays within wide guard rails
        rng = np.random.default_rng(12345)
        rejected = 0
        for _ in range(200):
            _, p = an.ks_test_normal(rng.normal(0.0, 1.0, 5000), 1.0)
            rejected += p < 0.05
        assert 0.02 <= rejected / 200 <= 0.09

    def test_scale_invariance(self):
        rng = np.random.default_rng(5)
        s = rng.normal(0.0, 1.3, 400)
        d0, _ = an.ks_test_normal(s, 1.7)
        d4, _ = an.ks_test_normal(4.0 * s, 16.0 * 1.7)
        dpi, _ = an.ks_test_normal(math.pi * s, math.pi ** 2 * 1.7)
        assert d4 == d0
        assert abs(dpi - d0) < 1e-12


class TestFcltCovariance:
    def _synthetic_paths(self, seed=777, n=4000, v=2.0):
        t_grid = np.array([0.2, 0.4, 0.6, 0.8, 1.0])
        a_vals = t_grid ** 1.75
        rng = np.random.default_rng(seed)
        var_inc = v * np.diff(np.concatenate([[0.0], a_vals]))
        incs = rng.normal(0.0, 1.0, (n, 5)) * np.sqrt(var_inc)
        return np.cumsum(incs, axis=1), t_grid, a_vals, v

    def test_time_changed_brownian_matches_target(self):
        # paths built with the exact covariance structure should sit well
        # inside 4 jackknife standard errors entrywise
        paths, t_grid, a_vals, v = self._synthetic_paths()
        rep = an.fclt_covariance_test(paths, np.arange(1, 6), t_grid, a_vals,
                                      v, 1.0, 0.0)
        assert rep.passed
        assert rep.max_abs_deviation < 4.0
        assert rep.psd_ok
        assert np.all(rep.marginal_ks_pvalues > 0.01)

    def test_wrong_variance_is_detected(self):
        paths, t_grid, a_vals, v = self._synthetic_paths()
        rep = an.fclt_covariance_test(paths, np.arange(1, 6), t_grid, a_vals,
                                      3.0 * v, 1.0, 0.0)
        assert not rep.passed

    def test_target_is_flat_across_the_later_time(self):
        # min(a(s), a(t)) = a(s) for t > s: independent-increment structure
        paths, t_grid, a_vals, v = self._synthetic_paths()
        rep = an.fclt_covariance_test(paths, np.arange(1, 6), t_grid, a_vals,
                                      v, 1.0, 0.0)
        assert rep.target_cov[0, 1] == rep.target_cov[0, 0]
        assert rep.target_cov[0, 4] == rep.target_cov[0, 0]

    def test_jackknife_closed_form_matches_brute_force(self):
        rng = np.random.default_rng(777)
        x, y = rng.normal(size=120), rng.normal(size=120)
        closed = an._jackknife_cov_se(x, y)
        loo = np.array([np.cov(np.delete(x, k), np.delete(y, k),
                               ddof=1)[0, 1] for k in range(120)])
        brute = math.sqrt(119 / 120 * np.sum((loo - loo.mean()) ** 2))
        assert closed == pytest.approx(brute, abs=1e-14)

    def test_single_point_grid_reduces_to_clt_variance(self):
        paths, _, _, v = self._synthetic_paths()
        rep = an.fclt_covariance_test(paths[:, -1:], [5], [1.0], [1.0], v,
                                      1.0, 0.0)
        assert rep.emp_cov.shape == (1, 1)
        assert abs(rep.emp_cov[0, 0] - v) < 4 * rep.se[0, 0]

    def test_endpoint_reproduces_clt_samples_exactly(self):
        ou = ornstein_uhlenbeck(1.0)
        cfg = eg.EnsembleConfig(ou, sch.power(0.75), 120, 200, 3,
                                init=eg.Fixed(0.0),
                                recorders=(eg.PathSnapshots(IDENT, (0.5, 1.0)),
                                           eg.RunningSumH(IDENT)))
        res = eg.run_ensemble(cfg)
        rep = an.fclt_covariance_test(
            res.records["snapshots"], res.records["snapshot_indices"],
            (0.5, 1.0), (0.5 ** 1.75, 1.0), 2.0, res.T_n, 0.0)
        clt = an.clt_statistic(res.records["sum_h"], 200, res.T_n, 0.0)
        assert np.array_equal(rep.paths[:, -1], clt)

    def test_singular_grid_rejected(self):
        paths, t_grid, a_vals, v = self._synthetic_paths()
        with pytest.raises(ValueError, match="singular"):
            an.fclt_covariance_test(paths, [1, 2, 2, 4, 5], t_grid, a_vals,
                                    v, 1.0, 0.0)

    def test_too_few_chains_rejected(self):
        paths, t_grid, a_vals, v = self._synthetic_paths(n=99)
        with pytest.raises(ValueError, match="100"):
            an.fclt_covariance_test(paths, np.arange(1, 6), t_grid, a_vals,
                                    v, 1.0, 0.0)


class TestDecomposition:
    def test_linear_solution_degeneracy(self):
        res = _linear_diag_records(sch.power(0.75), 1000, n_chains=16)
        d = an.decomposition_diagnostics(res.records, 1000, res.T_n, 0.0)
        assert np.all(d.r1 == 0.0)
        assert np.all(d.r2 == 0.0)
        assert np.max(np.abs(d.r3)) < 1e-12
        assert d.recombination_error < 1e-12

    def test_single_step_identity(self):
        res = _linear_diag_records(sch.power(0.75), 1, n_chains=4)
        d = an.decomposition_diagnostics(res.records, 1, res.T_n, 0.0)
        recombined = d.martingale + d.r0 + d.r1 - d.r2 - d.r3
        assert np.array_equal(recombined, d.statistic)

    def test_identity_with_quadrature_evaluators(self):
        # the recombination must close for any evaluator triple, here the
        # splined quadrature solution on 100 chains
        ss = shifted_sine()
        sol = solve_poisson(ss, WITCH, stationary_density(ss))
        phi, dphi, d2phi = sol.evaluators()
        cfg = eg.EnsembleConfig(ss, sch.power(0.75), 100, 1000, 31,
                                init=eg.UniformOver(),
                                recorders=(eg.PhiDiagnostics(WITCH, phi, dphi,
                                                             d2phi),))
        res = eg.run_ensemble(cfg)
        d = an.decomposition_diagnostics(res.records, 1000, res.T_n, sol.pi_h)
        assert d.n_chains == 100
        assert d.recombination_error <= 1e-10

    def test_remainders_shrink_with_n(self):
        ss = shifted_sine()
        sol = solve_poisson(ss, WITCH, stationary_density(ss))
        phi, dphi, d2phi = sol.evaluators()
        rec = eg.PhiDiagnostics(WITCH, phi, dphi, d2phi)
        totals = {}
        for n in (10 ** 3, 10 ** 5):
            cfg = eg.EnsembleConfig(ss, sch.power(0.75), 32, n, 31,
                                    init=eg.UniformOver(), recorders=(rec,))
            res = eg.run_ensemble(cfg, workers=4)
            d = an.decomposition_diagnostics(res.records, n, res.T_n,
                                             sol.pi_h)
            totals[n] = float(np.mean(np.abs(d.r0) + np.abs(d.r1)
                                      + np.abs(d.r2) + np.abs(d.r3)))
        assert totals[10 ** 5] < totals[10 ** 3]

    def test_missing_hooks_reported(self):
        with pytest.raises(ValueError, match="m_sum"):
            an.decomposition_diagnostics({"r0_sum": np.zeros(3)}, 10, 1.0,
                                         0.0)


class TestMartingaleConditions:
    def test_quadratic_variation_approaches_v_on_unit_steps(self):
        # with unit steps and the linear solution, each increment is
        # sqrt(2) xi, so sum Z^2/n concentrates at v = 2
        n = 20000
        res = _linear_diag_records(sch.table([1.0] * n), n)
        md = an.martingale_conditions(res.records, res.T_n, 2.0)
        se = 2.0 * math.sqrt(2.0 / (n * 8))
        assert abs(md.deviation_from_v) < 3 * se
        assert np.all(np.isfinite(md.max_z_over_sqrt_T))
        assert np.all(np.isfinite(md.sum_z2_over_T))

    def test_largest_increment_ratio_decays(self):
        means = {}
        for n in (10 ** 4, 10 ** 5):
            res = _linear_diag_records(sch.power(0.75), n, n_chains=20,
                                       seed=23)
            means[n] = an.martingale_conditions(res.records, res.T_n,
                                                2.0).mean_max_z
        assert means[10 ** 5] < means[10 ** 4]

    def test_single_step_value(self):
        res = _linear_diag_records(sch.power(0.75), 1, n_chains=4)
        md = an.martingale_conditions(res.records, res.T_n, 2.0)
        # T_1 = 1/eta_1 = 1, so the ratio is Z_1^2 eta_1
        assert np.allclose(md.sum_z2_over_T,
                           res.records["sum_z2"] * 1.0)

    def test_missing_hooks_reported(self):
        with pytest.raises(ValueError, match="sum_z2"):
            an.martingale_conditions({"max_abs_z": np.ones(2)}, 1.0, 1.0)


class TestW2Empirical:
    def test_identical_multisets(self):
        assert an.w2_empirical_1d([3.0, -1.0, 2.0], [2.0, 3.0, -1.0]) == 0.0

    def test_unit_shift_of_two_points(self):
        assert an.w2_empirical_1d([0.0, 0.0], [1.0, 1.0]) == 1.0

    def test_gaussian_mean_shift_oracle(self):
        rng = np.random.default_rng(202)
        a = rng.normal(0.0, 1.0, 10 ** 5)
        b = rng.normal(0.7, 1.0, 10 ** 5)
        assert abs(an.w2_empirical_1d(a, b) - 0.7) < 0.02

    def test_unequal_counts_rejected(self):
        with pytest.raises(ValueError):
            an.w2_empirical_1d([1.0, 2.0], [1.0])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            an.w2_empirical_1d([], [])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_metric_axioms_on_random_triples(self, seed):
        rng = np.random.default_rng(seed)
        a, b, c = rng.normal(0.0, 2.0, (3, 40))
        dab = an.w2_empirical_1d(a, b)
        dba = an.w2_empirical_1d(b, a)
        dac = an.w2_empirical_1d(a, c)
        dcb = an.w2_empirical_1d(c, b)
        assert dab == dba
        assert dab <= dac + dcb + 1e-12
        assert dab >= 0.0
