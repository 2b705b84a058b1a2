import datetime as dt

import numpy as np
import pytest

from mdturn.marketdata import DailyBar, Panel, Status
from mdturn.sizing import PortfolioWeights
from mdturn.timing import (
    BoostedEnsemble,
    MultiScaleFeatures,
    TIMING_FEATURES,
    TimingSignal,
    apply_timing_filter,
    build_multiscale_features,
    fit_timing_model,
    timing_signal,
)


def _toy_panel(last_day_rets, n_days=80):
    """Flat panel; each instrument's final day moves by its given return."""
    start = dt.date(2020, 1, 6)
    dates = []
    d = start
    while len(dates) < n_days:
        if d.weekday() < 5:
            dates.append(d)
        d += dt.timedelta(days=1)
    bars = []
    for j, r in enumerate(last_day_rets):
        inst = f"I{j}"
        for k, date in enumerate(dates):
            px = 10.0 if k < n_days - 1 else 10.0 * (1 + r)
            o = 10.0
            hi, lo = max(o, px), min(o, px)
            bars.append(DailyBar(inst, date, o, hi, lo, px, 1e5, 1e6, 1e9, "Energy", Status.NORMAL))
    return Panel.from_bars(bars), dates


class TestMultiScaleFeatures:
    def test_identical_returns_zero_dispersion(self):
        panel, dates = _toy_panel([0.01, 0.01, 0.01])
        f = build_multiscale_features(panel, dates[-1])
        assert f.values["dispersion_1"] == pytest.approx(0.0, abs=1e-15)

    def test_dispersion_matches_direct_stdev(self):
        rets = [0.01, -0.02, 0.03]
        panel, dates = _toy_panel(rets)
        f = build_multiscale_features(panel, dates[-1])
        assert f.values["dispersion_1"] == pytest.approx(float(np.std(rets)), abs=1e-12)
        assert f.values["mkt_ret_1"] == pytest.approx(float(np.mean(rets)), abs=1e-12)

    def test_trend_sign_matches_direction(self):
        start = dt.date(2020, 1, 6)
        dates = []
        d = start
        while len(dates) < 80:
            if d.weekday() < 5:
                dates.append(d)
            d += dt.timedelta(days=1)
        bars = []
        for k, date in enumerate(dates):
            px = 10.0 * (1.01**k)  # steady rise
            bars.append(DailyBar("UP", date, px, px, px, px, 1e5, 1e6, 1e9, "Energy", Status.NORMAL))
            px2 = 50.0 * (0.99**k)
            bars.append(DailyBar("DN", date, px2, px2, px2, px2, 1e5, 1e6, 1e9, "Materials", Status.NORMAL))
        panel = Panel.from_bars(bars)
        f = build_multiscale_features(panel, dates[-1])
        # mean log drift of +1% and -1% legs: slope ~ 0
        assert abs(f.values["trend_60"]) < 1e-3

        bars_up = [b for b in bars if b.instrument_id == "UP"]
        bars_up += [
            DailyBar("UP2", b.date, b.open, b.high, b.low, b.close, b.volume, b.turnover, b.market_cap, "Energy", b.status)
            for b in bars_up
        ]
        panel_up = Panel.from_bars(bars_up)
        f_up = build_multiscale_features(panel_up, dates[-1])
        assert f_up.values["trend_60"] > 0

    def test_insufficient_history_none(self):
        panel, dates = _toy_panel([0.01, 0.02], n_days=40)
        assert build_multiscale_features(panel, dates[-1]) is None

    def test_proxies_flagged(self):
        panel, dates = _toy_panel([0.01, 0.02, 0.0])
        f = build_multiscale_features(panel, dates[-1])
        assert "trend_60" in f.proxy_flags
        assert set(f.values) == set(TIMING_FEATURES)


class TestBoosting:
    def test_step_function_learnable(self):
        rng = np.random.default_rng(0)
        X = rng.uniform(-1, 1, size=(400, 3))
        y = np.where(X[:, 1] > 0.2, 1.0, -1.0)
        ens = fit_timing_model(X, y, np.zeros(400), n_trees=50, depth=3, shrinkage=0.3)
        assert ens.loss_traces["global"][-1] < 1e-3

    def test_loss_trace_non_increasing(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(300, 4))
        y = X[:, 0] * 0.5 + rng.normal(0, 0.3, 300)
        ens = fit_timing_model(X, y, np.zeros(300), n_trees=40)
        trace = np.array(ens.loss_traces["global"])
        assert np.all(np.diff(trace) <= 1e-12)

    def test_opposite_regimes_opposite_predictions(self):
        rng = np.random.default_rng(2)
        X = np.concatenate([rng.uniform(-1, 1, size=(200, 2)), rng.uniform(-1, 1, size=(200, 2))])
        regimes = np.array([0] * 200 + [1] * 200)
        y = np.concatenate([X[:200, 0], -X[200:, 0]])
        ens = fit_timing_model(X, y, regimes, n_trees=40, shrinkage=0.3)
        x_probe = np.array([0.8, 0.0])
        p0 = ens.predict(x_probe, 0)
        p1 = ens.predict(x_probe, 1)
        assert p0 > 0.3 and p1 < -0.3

    def test_sparse_regime_shares_global_flagged(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(120, 2))
        y = X[:, 0]
        regimes = np.array([0] * 110 + [2] * 10)
        ens = fit_timing_model(X, y, regimes, min_regime_samples=50)
        assert "regime_2_shares_global" in ens.flags
        assert not ens.has_regime(2)
        assert ens.predict(np.zeros(2), 2) == ens.predict(np.zeros(2), 99)

    def test_constant_labels_single_leaf_flagged(self):
        X = np.random.default_rng(4).normal(size=(100, 2))
        ens = fit_timing_model(X, np.full(100, 0.7), np.zeros(100))
        assert "constant_labels" in ens.flags
        assert ens.models["global"]["trees"] == []
        assert ens.predict(np.zeros(2), 0) == pytest.approx(0.7)

    def test_sample_order_invariance(self):
        rng = np.random.default_rng(5)
        X = rng.normal(size=(150, 3))
        y = X[:, 1] + rng.normal(0, 0.1, 150)
        perm = rng.permutation(150)
        a = fit_timing_model(X, y, np.zeros(150), n_trees=20)
        b = fit_timing_model(X[perm], y[perm], np.zeros(150), n_trees=20)
        probe = rng.normal(size=(10, 3))
        for x in probe:
            assert a.predict(x, 0) == pytest.approx(b.predict(x, 0), abs=1e-12)

    def test_serialization_round_trip(self):
        rng = np.random.default_rng(6)
        X = rng.normal(size=(100, 2))
        y = X[:, 0]
        ens = fit_timing_model(X, y, np.zeros(100), n_trees=5)
        back = BoostedEnsemble.from_json(ens.to_json())
        assert back.predict(np.array([0.3, -0.2]), 0) == ens.predict(np.array([0.3, -0.2]), 0)


class TestTimingSignal:
    def _features(self):
        return MultiScaleFeatures(dt.date(2021, 3, 1), {n: 0.0 for n in TIMING_FEATURES})

    def _scripted_ensemble(self, value):
        ens = BoostedEnsemble(shrinkage=0.1)
        ens.models["global"] = {"base": value, "trees": []}
        return ens

    def test_zero_betas_gives_half_multiplier(self):
        sig = timing_signal(self._scripted_ensemble(0.9), self._features(), 0, (0, 0, 0), vol_component=2.0)
        assert sig.value == 0.0
        assert sig.exposure_multiplier == 0.5

    def test_value_above_half_saturates(self):
        sig = timing_signal(self._scripted_ensemble(0.8), self._features(), 0, (1, 0, 0), vol_component=0.0)
        assert sig.exposure_multiplier == 1.0

    def test_direct_arithmetic(self):
        sig = timing_signal(self._scripted_ensemble(0.2), self._features(), 0, (1, 0, 0), vol_component=-0.4)
        assert sig.value == pytest.approx(0.2)
        assert sig.exposure_multiplier == pytest.approx(0.7)

    def test_exact_linear_form(self):
        sig = timing_signal(
            self._scripted_ensemble(0.3), self._features(), 0, (0.6, 0.3, 0.1), vol_component=-0.5,
            sentiment_component=0.2,
        )
        assert sig.value == 0.6 * 0.3 + 0.3 * (-0.5) + 0.1 * 0.2


class TestApplyTimingFilter:
    def _weights(self):
        return PortfolioWeights(
            date=None, instruments=("A", "B", "C"), weights=np.array([0.02, 0.01, 0.005])
        )

    def _signal(self, mult):
        return TimingSignal(dt.date(2021, 3, 1), 0, 0, 0, (0, 0, 0), 0.0, mult)

    def test_identity(self):
        out = apply_timing_filter(self._weights(), self._signal(1.0))
        assert np.array_equal(out.weights, [0.02, 0.01, 0.005])

    def test_full_derisk(self):
        out = apply_timing_filter(self._weights(), self._signal(0.0))
        assert np.all(out.weights == 0)

    def test_halving_exact(self):
        out = apply_timing_filter(self._weights(), self._signal(0.5))
        assert np.array_equal(out.weights, np.array([0.02, 0.01, 0.005]) * 0.5)

    def test_proportions_preserved(self):
        w = self._weights()
        out = apply_timing_filter(w, self._signal(0.73))
        base_ratio = w.weights / w.weights.sum()
        new_ratio = out.weights / out.weights.sum()
        assert np.allclose(base_ratio, new_ratio, atol=1e-15)
