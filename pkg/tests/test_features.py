import datetime as dt

import numpy as np
import pytest

from mdturn.features import (
    FEATURE_NAMES,
    FeaturePanel,
    compute_raw_features,
    forward_fill_decay,
    preprocess,
    sector_standardize,
    winsorize,
)
from mdturn.marketdata import (
    DailyBar,
    GeneratorConfig,
    Panel,
    Status,
    UniverseSnapshot,
    build_universe,
    generate_synthetic_panel,
)


def _flat_panel(closes_by_inst, n_days=300, sector="Technology"):
    """Panel where each instrument's last len(closes) days follow the given closes."""
    start = dt.date(2019, 1, 7)
    dates = []
    d = start
    while len(dates) < n_days:
        if d.weekday() < 5:
            dates.append(d)
        d += dt.timedelta(days=1)
    bars = []
    for inst, closes in closes_by_inst.items():
        for k, date in enumerate(dates):
            tail = n_days - len(closes)
            px = float(closes[k - tail]) if k >= tail else float(closes[0])
            bars.append(
                DailyBar(inst, date, px, px, px, px, 1e5, 1e5 * px, 1e9, sector, Status.NORMAL)
            )
    return Panel.from_bars(bars), dates


def _fp(values, missing=None, names=None, insts=None):
    values = np.asarray(values, dtype=float)
    if missing is None:
        missing = np.isnan(values)
    names = tuple(names or [f"f{j}" for j in range(values.shape[1])])
    insts = tuple(insts or [f"I{i}" for i in range(values.shape[0])])
    vals = values.copy()
    vals[missing] = np.nan
    return FeaturePanel(dt.date(2020, 1, 2), insts, names, vals, np.asarray(missing, dtype=bool))


class TestRawFeatures:
    def test_five_day_momentum_direct_ratio(self):
        panel, dates = _flat_panel({"A": [100, 100, 101, 102, 103, 104, 105], "B": [50] * 7})
        uni = UniverseSnapshot(dates[-1], frozenset({"A", "B"}))
        fp = compute_raw_features(panel, dates[-1], uni)
        row = fp.instruments.index("A")
        assert fp.values[row, fp.feature_names.index("mom_5")] == pytest.approx(0.05, abs=1e-12)

    def test_constant_price_momentum_zero(self):
        panel, dates = _flat_panel({"A": [42.0] * 10})
        uni = UniverseSnapshot(dates[-1], frozenset({"A"}))
        fp = compute_raw_features(panel, dates[-1], uni)
        for name in ("mom_5", "mom_10", "mom_20", "mom_60", "rev_5"):
            assert fp.values[0, fp.feature_names.index(name)] == pytest.approx(0.0, abs=1e-12)

    def test_suspended_gap_missing(self):
        start = dt.date(2019, 1, 7)
        dates = []
        d = start
        while len(dates) < 100:
            if d.weekday() < 5:
                dates.append(d)
            d += dt.timedelta(days=1)
        bars = []
        for k, date in enumerate(dates):
            if k == len(dates) - 1:
                bars.append(DailyBar("A", date, 10, 10, 10, 10, 0.0, 0.0, 1e9, "Energy", Status.SUSPENDED))
            else:
                bars.append(DailyBar("A", date, 10, 10.1, 9.9, 10, 1e5, 1e6, 1e9, "Energy", Status.NORMAL))
        panel = Panel.from_bars(bars)
        uni = UniverseSnapshot(dates[-1], frozenset({"A"}))
        fp = compute_raw_features(panel, dates[-1], uni)
        assert fp.missing[0, fp.feature_names.index("gap")]

    def test_insufficient_history_missing_not_error(self):
        panel, dates = _flat_panel({"A": [10.0] * 5}, n_days=30)
        uni = UniverseSnapshot(dates[-1], frozenset({"A"}))
        fp = compute_raw_features(panel, dates[-1], uni)
        assert fp.missing[0].all()

    def test_no_lookahead_by_truncation(self):
        cfg = GeneratorConfig(n_instruments=12, n_days=400, n_sectors=3)
        panel = generate_synthetic_panel(cfg, seed=9)
        date = panel.dates[330]
        uni = build_universe(panel, date)
        full = compute_raw_features(panel, date, uni)
        trunc = compute_raw_features(panel.truncate_after(date), date, uni)
        assert np.array_equal(full.missing, trunc.missing)
        assert np.array_equal(full.values[~full.missing], trunc.values[~trunc.missing])


class TestWinsorize:
    def test_constant_column_unchanged(self):
        fp = _fp([[5.0], [5.0], [5.0]])
        out = winsorize(fp, 0.01, 0.99)
        assert np.allclose(out.values, 5.0)

    def test_matches_sort_based_quantile_oracle(self):
        rng = np.random.default_rng(17)
        vals = np.arange(1.0, 101.0).reshape(-1, 1)
        fp = _fp(vals)
        out = winsorize(fp, 0.01, 0.99)

        # sort-based oracle: next-higher / next-lower order statistics
        srt = np.sort(vals[:, 0])
        lo = srt[int(np.ceil(0.01 * (len(srt) - 1)))]
        hi = srt[int(np.floor(0.99 * (len(srt) - 1)))]
        expect = np.clip(vals[:, 0], lo, hi)
        assert np.array_equal(out.values[:, 0], expect)
        assert out.values[:, 0].min() == lo == 2.0
        assert out.values[:, 0].max() == hi == 99.0

        # same oracle on a shuffled noisy column
        noisy = rng.normal(size=(57, 1))
        out2 = winsorize(_fp(noisy), 0.05, 0.9)
        srt2 = np.sort(noisy[:, 0])
        lo2 = srt2[int(np.ceil(0.05 * 56))]
        hi2 = srt2[int(np.floor(0.9 * 56))]
        assert np.array_equal(out2.values[:, 0], np.clip(noisy[:, 0], lo2, hi2))

    def test_idempotent(self):
        rng = np.random.default_rng(0)
        fp = _fp(rng.normal(size=(50, 3)))
        once = winsorize(fp, 0.05, 0.95)
        twice = winsorize(once, 0.05, 0.95)
        assert np.allclose(once.values, twice.values, atol=0)

    def test_missing_untouched(self):
        vals = np.array([[1.0], [np.nan], [100.0], [2.0], [3.0]])
        fp = _fp(vals)
        out = winsorize(fp, 0.25, 0.75)
        assert out.missing[1, 0]
        assert np.isnan(out.values[1, 0])

    def test_bad_bounds_rejected(self):
        with pytest.raises(ValueError):
            winsorize(_fp([[1.0]]), 0.9, 0.1)


class TestSectorStandardize:
    def test_two_member_sector_epsilon_zero(self):
        fp = _fp([[1.0], [3.0]], insts=["A", "B"])
        out = sector_standardize(fp, {"A": "S", "B": "S"}, epsilon=0.0)
        assert out.values[:, 0] == pytest.approx([-1.0, 1.0])

    def test_single_member_sector_zero(self):
        fp = _fp([[7.0], [1.0]], insts=["A", "B"])
        out = sector_standardize(fp, {"A": "Solo", "B": "Other"}, epsilon=1e-8)
        assert out.values[0, 0] == 0.0
        assert out.values[1, 0] == 0.0

    def test_all_missing_column_stays_missing(self):
        fp = _fp([[np.nan], [np.nan]], insts=["A", "B"])
        out = sector_standardize(fp, {"A": "S", "B": "S"})
        assert out.missing.all()

    def test_shift_invariance_per_sector(self):
        rng = np.random.default_rng(3)
        vals = rng.normal(size=(40, 4))
        insts = [f"I{i}" for i in range(40)]
        sectors = {inst: ("X" if i % 2 else "Y") for i, inst in enumerate(insts)}
        base = sector_standardize(_fp(vals, insts=insts), sectors)
        shifted_vals = vals.copy()
        for i, inst in enumerate(insts):
            shifted_vals[i] += 13.7 if sectors[inst] == "X" else -4.2
        shifted = sector_standardize(_fp(shifted_vals, insts=insts), sectors)
        assert np.allclose(base.values, shifted.values, atol=1e-9)

    def test_sector_means_near_zero(self):
        rng = np.random.default_rng(4)
        vals = rng.normal(size=(30, 3)) * 10 + 2
        insts = [f"I{i}" for i in range(30)]
        sectors = {inst: ("A" if i < 15 else "B") for i, inst in enumerate(insts)}
        out = sector_standardize(_fp(vals, insts=insts), sectors)
        for sec in ("A", "B"):
            rows = [i for i, inst in enumerate(insts) if sectors[inst] == sec]
            assert abs(np.mean(out.values[rows], axis=0)).max() < 1e-6


class TestForwardFillDecay:
    def test_fill_from_yesterday(self):
        old = _fp([[2.0]])
        cur = _fp([[np.nan]])
        out = forward_fill_decay([old, cur], halflife=5.0)
        assert out.values[0, 0] == pytest.approx(2.0 * 0.5 ** (1 / 5))
        assert not out.missing[0, 0]

    def test_present_value_unchanged(self):
        old = _fp([[2.0]])
        cur = _fp([[3.0]])
        out = forward_fill_decay([old, cur], halflife=5.0)
        assert out.values[0, 0] == 3.0

    def test_never_observed_stays_missing(self):
        old = _fp([[np.nan]])
        cur = _fp([[np.nan]])
        out = forward_fill_decay([old, cur], halflife=5.0)
        assert out.missing[0, 0]

    def test_stale_beyond_five_halflives_stays_missing(self):
        panels = [_fp([[1.0]])] + [_fp([[np.nan]]) for _ in range(11)]
        out = forward_fill_decay(panels, halflife=2.0)  # gap 11 > 10
        assert out.missing[0, 0]

    def test_most_recent_observation_wins(self):
        history = [_fp([[5.0]]), _fp([[7.0]]), _fp([[np.nan]])]
        out = forward_fill_decay(history, halflife=5.0)
        assert out.values[0, 0] == pytest.approx(7.0 * 0.5 ** (1 / 5))


class TestPipeline:
    def test_pipeline_pure_function_of_truncated_panel(self):
        cfg = GeneratorConfig(n_instruments=10, n_days=380, n_sectors=2)
        panel = generate_synthetic_panel(cfg, seed=21)
        date = panel.dates[340]
        uni = build_universe(panel, date)
        sectors = dict(zip(panel.instruments, panel.sectors))
        a = preprocess(panel, date, uni, sectors)
        b = preprocess(panel.truncate_after(date), date, uni, sectors)
        assert np.array_equal(a.missing, b.missing)
        assert np.array_equal(a.values[~a.missing], b.values[~b.missing])

    def test_feature_count(self):
        assert len(FEATURE_NAMES) == 28
