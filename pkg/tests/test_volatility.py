import datetime as dt
import math

import numpy as np
import pytest

from mdturn.errors import DataError, FitError
from mdturn.volatility import (
    GarchParams,
    SvFilter,
    SvModel,
    annualized_mean_vol,
    combine_vols,
    fit_garch,
    garch_variance_path,
    particle_filter_sv,
    project_simplex,
    realized_vol,
    stress_index,
)


def simulate_garch(params: GarchParams, n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    sigma2 = params.omega / (1 - params.alpha - params.beta)
    out = np.empty(n)
    for t in range(n):
        r = math.sqrt(sigma2) * rng.standard_normal()
        out[t] = r
        sigma2 = params.omega + params.alpha * r * r + params.beta * sigma2
    return out


class TestGarch:
    def test_recovery_from_known_params(self):
        true = GarchParams(omega=1e-5, alpha=0.08, beta=0.90)
        rets = simulate_garch(true, 5000, seed=42)
        params, path, flags = fit_garch(rets)
        assert abs(params.persistence - 0.98) < 0.05
        assert "fallback" not in flags

    def test_constant_returns_flagged(self):
        rets = np.zeros(200)
        params, path, flags = fit_garch(rets)
        assert "fallback" in flags

    def test_stationarity_always_enforced(self):
        for seed in range(5):
            rets = np.random.default_rng(seed).normal(0, 0.02, size=300)
            params, _, _ = fit_garch(rets)
            assert params.persistence < 1.0

    def test_variance_path_strictly_positive(self):
        true = GarchParams(omega=2e-6, alpha=0.1, beta=0.85)
        rets = simulate_garch(true, 1000, seed=3)
        _, path, _ = fit_garch(rets)
        assert np.all(path > 0)

    def test_too_short_raises(self):
        with pytest.raises(FitError):
            fit_garch(np.zeros(50))

    def test_nonfinite_raises(self):
        r = np.zeros(200)
        r[10] = np.nan
        with pytest.raises(DataError):
            fit_garch(r)

    def test_variance_path_matches_loop_recursion(self):
        params = GarchParams(omega=1e-6, alpha=0.07, beta=0.9)
        rng = np.random.default_rng(8)
        resid = rng.normal(0, 0.01, size=50)
        path = garch_variance_path(resid, params, sigma2_0=4e-4)
        expect = np.empty(50)
        expect[0] = 4e-4
        for t in range(1, 50):
            expect[t] = params.omega + params.alpha * resid[t - 1] ** 2 + params.beta * expect[t - 1]
        assert np.allclose(path, expect, rtol=1e-12)


class TestRealizedVol:
    def test_constant_returns(self):
        assert realized_vol(np.full(30, 0.02), 20) == pytest.approx(0.0004)

    def test_direct_mean_of_squares(self):
        assert realized_vol(np.array([0.01, -0.01]), 2) == pytest.approx(1e-4)

    def test_scaling_homogeneity(self):
        rng = np.random.default_rng(1)
        r = rng.normal(size=40)
        base = realized_vol(r, 20)
        scaled = realized_vol(3.0 * r, 20)
        assert scaled == pytest.approx(9.0 * base)

    def test_insufficient_history(self):
        assert realized_vol(np.array([0.01]), 20) is None

    def test_bad_window(self):
        with pytest.raises(ValueError):
            realized_vol(np.array([0.01, 0.02]), 1)


class TestParticleFilter:
    def test_determinism(self):
        rng = np.random.default_rng(5)
        rets = rng.normal(0, 0.02, size=200)
        a = particle_filter_sv(rets, n_particles=200, seed=9)
        b = particle_filter_sv(rets, n_particles=200, seed=9)
        assert np.array_equal(a, b)

    def test_concentrates_near_true_variance(self):
        true_var = 4e-4
        rng = np.random.default_rng(11)
        rets = rng.normal(0, math.sqrt(true_var), size=600)
        model = SvModel(mu=math.log(true_var), rho=0.97, sigma_eta=0.05)
        path = particle_filter_sv(rets, n_particles=1000, seed=2, model=model)
        post_burn = path[100:]
        assert abs(np.mean(post_burn) / true_var - 1.0) < 0.2

    def test_resample_resets_ess(self):
        model = SvModel(mu=math.log(1e-4))
        filt = SvFilter(model, n_particles=200, seed=1)
        rng = np.random.default_rng(0)
        for r in rng.normal(0, 0.01, size=100):
            filt.step(float(r))
            if filt.effective_sample_size >= 200 - 1e-9:
                # a resample just happened (weights uniform) or weights were untouched
                assert filt.effective_sample_size == pytest.approx(200)

    def test_min_particles(self):
        with pytest.raises(ValueError):
            SvFilter(SvModel(mu=0.0), n_particles=10, seed=0)


class TestSimplexProjection:
    def test_already_on_simplex(self):
        w = np.array([0.2, 0.3, 0.5])
        assert np.allclose(project_simplex(w), w)

    def test_projection_contract(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            v = rng.normal(size=3) * 5
            w = project_simplex(v)
            assert w.sum() == pytest.approx(1.0, abs=1e-12)
            assert np.all(w >= 0)


class TestCombineVols:
    def _dates(self, n):
        return [dt.date(2020, 1, 1) + dt.timedelta(days=k) for k in range(n)]

    def test_identical_components_give_common_value(self):
        n = 50
        comps = np.full((n, 3), 2.5e-4)
        rets = np.random.default_rng(0).normal(0, 0.015, size=n)
        ests = combine_vols(self._dates(n), comps, rets)
        for e in ests:
            assert e.sigma2_combined == pytest.approx(2.5e-4, rel=1e-12)

    def test_weights_on_simplex(self):
        n = 80
        rng = np.random.default_rng(2)
        comps = np.abs(rng.normal(2e-4, 5e-5, size=(n, 3)))
        rets = rng.normal(0, 0.015, size=n)
        for e in combine_vols(self._dates(n), comps, rets):
            assert sum(e.weights) == pytest.approx(1.0, abs=1e-12)
            assert all(w >= 0 for w in e.weights)
            assert min(comps[0].min(), 0) <= e.sigma2_combined <= comps.max() * 1.0001

    def test_perfect_component_dominates(self):
        # component 0 equals tomorrow's squared return exactly; others are noise
        n = 400
        rng = np.random.default_rng(7)
        rets = rng.normal(0, 0.02, size=n)
        comps = np.empty((n, 3))
        comps[:-1, 0] = rets[1:] ** 2
        comps[-1, 0] = rets[-1] ** 2
        comps[:, 1] = np.abs(rng.normal(4e-4, 2e-4, size=n))
        comps[:, 2] = np.abs(rng.normal(4e-4, 2e-4, size=n))
        ests = combine_vols(self._dates(n), comps, rets)
        w0_late = np.mean([e.weights[0] for e in ests[-50:]])
        assert w0_late > 0.6

    def test_combined_is_convex_combination(self):
        n = 60
        rng = np.random.default_rng(3)
        comps = np.abs(rng.normal(3e-4, 1e-4, size=(n, 3)))
        rets = rng.normal(0, 0.015, size=n)
        for t, e in enumerate(combine_vols(self._dates(n), comps, rets)):
            assert comps[t].min() - 1e-15 <= e.sigma2_combined <= comps[t].max() + 1e-15


class TestStressIndex:
    def _dates(self, n):
        return [dt.date(2020, 1, 1) + dt.timedelta(days=k) for k in range(n)]

    def test_level_equal_to_trailing_mean_gives_zero(self):
        levels = np.concatenate([np.array([0.1, 0.3] * 20), [0.2]])
        out = stress_index(self._dates(len(levels)), levels, trailing_window=40)
        assert out[-1].zscore == pytest.approx(0.0)

    def test_constant_history_flagged(self):
        levels = np.full(60, 0.2)
        out = stress_index(self._dates(60), levels, trailing_window=50)
        assert out[-1].zscore == 0.0
        assert "zero_trailing_stdev" in out[-1].flags

    def test_doubling_vols_doubles_level(self):
        sig2 = np.array([1e-4, 4e-4, 9e-4])
        assert annualized_mean_vol(4 * sig2) == pytest.approx(2 * annualized_mean_vol(sig2))

    def test_no_lookahead_in_zscore(self):
        rng = np.random.default_rng(4)
        levels = np.abs(rng.normal(0.2, 0.05, size=100))
        full = stress_index(self._dates(100), levels, trailing_window=30)
        half = stress_index(self._dates(70), levels[:70], trailing_window=30)
        for a, b in zip(full[:70], half):
            assert a.zscore == b.zscore
