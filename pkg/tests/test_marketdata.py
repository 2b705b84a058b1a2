import datetime as dt

import numpy as np
import pytest

from mdturn.errors import ConfigError, DataError, SchemaError
from mdturn.marketdata import (
    DailyBar,
    GeneratorConfig,
    Panel,
    Status,
    UniverseRules,
    build_universe,
    generate_synthetic_panel,
    load_panel,
)


def _bar(inst, date, o, h, l, c, vol=1000.0, sector="Technology", status=Status.NORMAL, cap=1e9):
    return DailyBar(
        instrument_id=inst,
        date=date,
        open=o,
        high=h,
        low=l,
        close=c,
        volume=vol,
        turnover=vol * c,
        market_cap=cap,
        sector=sector,
        status=status,
    )


def _write_csv(path, rows):
    header = "instrument_id,date,open,high,low,close,volume,turnover,market_cap,sector,status"
    path.write_text(header + "\n" + "\n".join(rows) + "\n")


class TestLoadPanel:
    def test_three_row_csv_parses(self, tmp_path):
        p = tmp_path / "panel.csv"
        _write_csv(
            p,
            [
                "A,2020-01-02,10,11,9,10.5,1000,10500,1e9,Technology,Normal",
                "A,2020-01-03,10.5,12,10,11,1200,13200,1e9,Technology,Normal",
                "B,2020-01-02,20,21,19,20,500,10000,2e9,Energy,Normal",
            ],
        )
        panel = load_panel(p)
        assert panel.n_days == 2
        assert panel.n_instruments == 2
        assert len(list(panel.iter_bars())) == 3
        assert panel.bar("A", dt.date(2020, 1, 3)).close == 11.0

    def test_high_below_low_reports_line(self, tmp_path):
        p = tmp_path / "panel.csv"
        _write_csv(
            p,
            [
                "A,2020-01-02,10,11,9,10.5,1000,10500,1e9,Technology,Normal",
                "A,2020-01-03,10.5,9.0,10,9.5,1200,11400,1e9,Technology,Normal",
            ],
        )
        with pytest.raises(DataError, match="line 3"):
            load_panel(p)

    def test_duplicate_pair_rejected(self, tmp_path):
        p = tmp_path / "panel.csv"
        _write_csv(
            p,
            [
                "A,2020-01-02,10,11,9,10.5,1000,10500,1e9,Technology,Normal",
                "A,2020-01-02,10,11,9,10.5,1000,10500,1e9,Technology,Normal",
            ],
        )
        with pytest.raises(DataError, match="duplicate"):
            load_panel(p)

    def test_missing_column_schema_error(self, tmp_path):
        p = tmp_path / "panel.csv"
        p.write_text("instrument_id,date,open,high,low,close\nA,2020-01-02,1,2,0.5,1\n")
        with pytest.raises(SchemaError):
            load_panel(p)

    def test_non_monotone_dates_rejected(self, tmp_path):
        p = tmp_path / "panel.csv"
        _write_csv(
            p,
            [
                "A,2020-01-03,10,11,9,10.5,1000,10500,1e9,Technology,Normal",
                "A,2020-01-02,10,11,9,10.5,1000,10500,1e9,Technology,Normal",
            ],
        )
        with pytest.raises(DataError, match="non-monotone"):
            load_panel(p)

    def test_column_mapping(self, tmp_path):
        p = tmp_path / "panel.csv"
        p.write_text(
            "sym,date,open,high,low,close,volume,turnover,market_cap,sector,status\n"
            "A,2020-01-02,10,11,9,10.5,1000,10500,1e9,Technology,Normal\n"
        )
        panel = load_panel(p, schema={"instrument_id": "sym"})
        assert panel.instruments == ("A",)


class TestSyntheticGenerator:
    def test_determinism(self):
        cfg = GeneratorConfig(n_instruments=2, n_days=5, n_sectors=2)
        a = generate_synthetic_panel(cfg, seed=7)
        b = generate_synthetic_panel(cfg, seed=7)
        assert a == b

    def test_different_seed_differs(self):
        cfg = GeneratorConfig(n_instruments=2, n_days=5, n_sectors=2)
        a = generate_synthetic_panel(cfg, seed=7)
        b = generate_synthetic_panel(cfg, seed=8)
        assert a != b

    def test_all_bars_satisfy_invariants(self):
        cfg = GeneratorConfig(n_instruments=50, n_days=1000, n_sectors=8)
        panel = generate_synthetic_panel(cfg, seed=1)
        bad = [b for b in panel.iter_bars() if b.violations()]
        assert bad == [], f"{len(bad)} bars violate invariants, first: {bad[:1]}"

    def test_zero_config_rejected(self):
        with pytest.raises(ConfigError):
            generate_synthetic_panel(GeneratorConfig(n_instruments=0, n_days=5), seed=1)
        with pytest.raises(ConfigError):
            generate_synthetic_panel(GeneratorConfig(n_instruments=5, n_days=0), seed=1)

    def test_zero_vol_multiplier_returns_equal_drift(self):
        cfg = GeneratorConfig(
            n_instruments=3,
            n_days=40,
            n_sectors=2,
            vol_multiplier=0.0,
            suspension_rate=0.0,
            st_fraction=0.0,
            late_listing_fraction=0.0,
        )
        panel = generate_synthetic_panel(cfg, seed=3)
        ratios = panel.close[1:] / panel.close[:-1]
        # per instrument, every close-to-close ratio equals the same drift factor
        assert np.allclose(ratios, ratios[0][None, :], rtol=0, atol=1e-12)
        assert np.allclose(panel.open[1:], panel.close[:-1], rtol=0, atol=1e-12)

    def test_round_trip_csv(self, tmp_path):
        cfg = GeneratorConfig(n_instruments=4, n_days=30, n_sectors=3)
        panel = generate_synthetic_panel(cfg, seed=11)
        path = tmp_path / "rt.csv"
        panel.to_csv(path)
        loaded = load_panel(path)
        assert loaded == panel


class TestUniverse:
    def _mini_panel(self, n_days=300):
        start = dt.date(2020, 1, 6)
        dates = []
        d = start
        while len(dates) < n_days:
            if d.weekday() < 5:
                dates.append(d)
            d += dt.timedelta(days=1)
        bars = []
        for date in dates:
            bars.append(_bar("GOOD", date, 10, 10.2, 9.9, 10, vol=1e6, cap=1e9))
            bars.append(_bar("SMALL", date, 5, 5.1, 4.9, 5, vol=1e6, cap=1e8))
            bars.append(_bar("ST", date, 8, 8.1, 7.9, 8, vol=1e6, status=Status.SPECIAL_TREATMENT))
        # short-history instrument appears late
        for date in dates[-100:]:
            bars.append(_bar("YOUNG", date, 4, 4.1, 3.9, 4, vol=1e6, cap=1e9))
        return Panel.from_bars(bars), dates

    def test_filters(self):
        panel, dates = self._mini_panel()
        snap = build_universe(panel, dates[-1])
        assert "GOOD" in snap.members
        assert "SMALL" not in snap.members  # below cap floor
        assert "ST" not in snap.members  # special treatment excluded
        assert "YOUNG" not in snap.members  # only 100 days of history

    def test_all_filtered_gives_empty_snapshot(self):
        panel, dates = self._mini_panel()
        rules = UniverseRules(min_market_cap=1e15)
        snap = build_universe(panel, dates[-1], rules)
        assert snap.members == frozenset()

    def test_unknown_date_raises(self):
        panel, dates = self._mini_panel()
        with pytest.raises(DataError):
            build_universe(panel, dt.date(1999, 1, 1))

    def test_extreme_move_excluded(self):
        start = dt.date(2020, 1, 6)
        dates = []
        d = start
        while len(dates) < 300:
            if d.weekday() < 5:
                dates.append(d)
            d += dt.timedelta(days=1)
        bars = []
        for k, date in enumerate(dates):
            px = 10.0
            if k == 295:
                px = 14.0  # +40% jump inside the lookback window
            bars.append(_bar("JUMPY", date, px, px * 1.01, px * 0.99, px, vol=1e6))
        panel = Panel.from_bars(bars)
        snap = build_universe(panel, dates[-1])
        assert "JUMPY" not in snap.members

    def test_no_lookahead(self):
        cfg = GeneratorConfig(n_instruments=20, n_days=400, n_sectors=4)
        panel = generate_synthetic_panel(cfg, seed=5)
        date = panel.dates[320]
        full = build_universe(panel, date)
        truncated = build_universe(panel.truncate_after(date), date)
        assert full.members == truncated.members


class TestPanelReturns:
    def test_suspension_gap_return_accumulates(self):
        dates = [dt.date(2020, 1, 6) + dt.timedelta(days=k) for k in range(4)]
        bars = [
            _bar("A", dates[0], 10, 10, 10, 10),
            _bar("A", dates[1], 10, 10, 10, 10, vol=0.0, status=Status.SUSPENDED),
            _bar("A", dates[2], 10, 10, 10, 10, vol=0.0, status=Status.SUSPENDED),
            _bar("A", dates[3], 12, 12, 12, 12),
        ]
        # suspended bars carry the close; zero turnover
        bars[1] = DailyBar("A", dates[1], 10, 10, 10, 10, 0.0, 0.0, 1e9, "Technology", Status.SUSPENDED)
        bars[2] = DailyBar("A", dates[2], 10, 10, 10, 10, 0.0, 0.0, 1e9, "Technology", Status.SUSPENDED)
        panel = Panel.from_bars(bars)
        rets = panel.simple_returns()
        assert rets[1, 0] == 0.0 and rets[2, 0] == 0.0
        assert rets[3, 0] == pytest.approx(0.2)
