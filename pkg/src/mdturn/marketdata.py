"""Market-data model: daily bars, panels, CSV ingestion, synthetic
panel generation, and universe filtering.

A Panel is an immutable array-backed container of one instrument-day
bar per (date, instrument). Suspended days are retained as bars with
volume 0 and the last traded close carried into all four price fields,
so close-to-close returns across a suspension accumulate at resume.
"""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import ConfigError, DataError, SchemaError
from .seeds import substream

SECTORS = (
    "Technology",
    "Healthcare",
    "ConsumerDiscretionary",
    "Industrials",
    "Materials",
    "ConsumerStaples",
    "Financials",
    "Energy",
)

CSV_COLUMNS = (
    "instrument_id",
    "date",
    "open",
    "high",
    "low",
    "close",
    "volume",
    "turnover",
    "market_cap",
    "sector",
    "status",
)


class Status(IntEnum):
    NORMAL = 0
    SUSPENDED = 1
    SPECIAL_TREATMENT = 2


_STATUS_NAMES = {
    Status.NORMAL: "Normal",
    Status.SUSPENDED: "Suspended",
    Status.SPECIAL_TREATMENT: "SpecialTreatment",
}
_STATUS_FROM_NAME = {v: k for k, v in _STATUS_NAMES.items()}


@dataclass(frozen=True)
class DailyBar:
    """One instrument-day of market data."""

    instrument_id: str
    date: dt.date
    open: float
    high: float
    low: float
    close: float
    volume: float
    turnover: float
    market_cap: float
    sector: str
    status: Status = Status.NORMAL

    def violations(self) -> list[str]:
        """Invariant violations for this bar, empty when well-formed."""
        out = []
        if not (self.open > 0 and self.high > 0 and self.low > 0 and self.close > 0):
            out.append("prices must be > 0")
        if not (self.low <= min(self.open, self.close) and max(self.open, self.close) <= self.high):
            out.append("low <= min(open, close) <= max(open, close) <= high violated")
        if self.volume < 0:
            out.append("volume must be >= 0")
        if self.turnover < 0:
            out.append("turnover must be >= 0")
        if not self.market_cap > 0:
            out.append("market_cap must be > 0")
        if (self.volume == 0) != (self.status == Status.SUSPENDED):
            out.append("volume = 0 iff status = Suspended violated")
        return out


@dataclass(frozen=True)
class UniverseSnapshot:
    """Instruments passing all tradability filters on one date."""

    date: dt.date
    members: frozenset[str]

    def sorted_members(self) -> list[str]:
        return sorted(self.members)


@dataclass(frozen=True)
class UniverseRules:
    """Filter thresholds for universe construction."""

    min_market_cap: float = 5e8
    min_avg_turnover: float = 1e7
    turnover_window: int = 20
    min_history_days: int = 252
    max_abs_return: float = 0.30
    extreme_window: int = 20


class Panel:
    """Immutable panel of daily bars on a shared trading calendar.

    Arrays are (T, N) with T dates and N instruments; `present[t, i]`
    is False before an instrument's first listed day. After
    construction the arrays must not be mutated.
    """

    def __init__(
        self,
        dates: list[dt.date],
        instruments: list[str],
        sectors: list[str],
        open_: np.ndarray,
        high: np.ndarray,
        low: np.ndarray,
        close: np.ndarray,
        volume: np.ndarray,
        turnover: np.ndarray,
        market_cap: np.ndarray,
        status: np.ndarray,
        present: np.ndarray,
    ):
        self.dates = tuple(dates)
        self.instruments = tuple(instruments)
        self.sectors = tuple(sectors)
        self.open = open_
        self.high = high
        self.low = low
        self.close = close
        self.volume = volume
        self.turnover = turnover
        self.market_cap = market_cap
        self.status = status
        self.present = present
        self._date_idx = {d: t for t, d in enumerate(self.dates)}
        self._inst_idx = {s: i for i, s in enumerate(self.instruments)}
        first = np.full(len(instruments), len(dates), dtype=np.int64)
        for i in range(len(instruments)):
            nz = np.flatnonzero(present[:, i])
            if nz.size:
                first[i] = nz[0]
        self.first_present = first
        self._validate()

    # -- basic access ---------------------------------------------------

    @property
    def calendar(self) -> tuple[dt.date, ...]:
        return self.dates

    @property
    def n_days(self) -> int:
        return len(self.dates)

    @property
    def n_instruments(self) -> int:
        return len(self.instruments)

    def date_index(self, date: dt.date) -> int:
        try:
            return self._date_idx[date]
        except KeyError:
            raise DataError(f"date {date} not in panel calendar") from None

    def instrument_index(self, instrument_id: str) -> int:
        try:
            return self._inst_idx[instrument_id]
        except KeyError:
            raise DataError(f"unknown instrument {instrument_id!r}") from None

    def sector_of(self, instrument_id: str) -> str:
        return self.sectors[self.instrument_index(instrument_id)]

    def has_bar(self, instrument_id: str, date: dt.date) -> bool:
        return bool(self.present[self.date_index(date), self.instrument_index(instrument_id)])

    def bar(self, instrument_id: str, date: dt.date) -> DailyBar:
        t = self.date_index(date)
        i = self.instrument_index(instrument_id)
        if not self.present[t, i]:
            raise DataError(f"no bar for {instrument_id!r} on {date}")
        return DailyBar(
            instrument_id=instrument_id,
            date=date,
            open=float(self.open[t, i]),
            high=float(self.high[t, i]),
            low=float(self.low[t, i]),
            close=float(self.close[t, i]),
            volume=float(self.volume[t, i]),
            turnover=float(self.turnover[t, i]),
            market_cap=float(self.market_cap[t, i]),
            sector=self.sectors[i],
            status=Status(int(self.status[t, i])),
        )

    def bars_on(self, date: dt.date) -> list[DailyBar]:
        t = self.date_index(date)
        return [
            self.bar(self.instruments[i], date)
            for i in range(self.n_instruments)
            if self.present[t, i]
        ]

    def iter_bars(self):
        """All bars ordered by (date, instrument)."""
        for date in self.dates:
            yield from self.bars_on(date)

    def simple_returns(self) -> np.ndarray:
        """Close-to-close simple returns, NaN on the first present day."""
        r = np.full_like(self.close, np.nan)
        prev = self.close[:-1]
        with np.errstate(invalid="ignore", divide="ignore"):
            r[1:] = self.close[1:] / prev - 1.0
        r[~self.present] = np.nan
        r[:-1][~self.present[:-1]] = np.nan
        for i in range(self.n_instruments):
            f = self.first_present[i]
            if f < self.n_days:
                r[f, i] = np.nan
        return r

    # -- transforms -----------------------------------------------------

    def truncate_after(self, date: dt.date) -> "Panel":
        """New panel keeping only dates <= date."""
        t = self.date_index(date)
        sl = slice(0, t + 1)
        return Panel(
            list(self.dates[: t + 1]),
            list(self.instruments),
            list(self.sectors),
            self.open[sl].copy(),
            self.high[sl].copy(),
            self.low[sl].copy(),
            self.close[sl].copy(),
            self.volume[sl].copy(),
            self.turnover[sl].copy(),
            self.market_cap[sl].copy(),
            self.status[sl].copy(),
            self.present[sl].copy(),
        )

    def to_csv(self, path) -> None:
        """Write all bars sorted by (date, instrument); lossless float round-trip."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for t, date in enumerate(self.dates):
                for i, inst in enumerate(self.instruments):
                    if not self.present[t, i]:
                        continue
                    w.writerow(
                        [
                            inst,
                            date.isoformat(),
                            repr(float(self.open[t, i])),
                            repr(float(self.high[t, i])),
                            repr(float(self.low[t, i])),
                            repr(float(self.close[t, i])),
                            repr(float(self.volume[t, i])),
                            repr(float(self.turnover[t, i])),
                            repr(float(self.market_cap[t, i])),
                            self.sectors[i],
                            _STATUS_NAMES[Status(int(self.status[t, i]))],
                        ]
                    )

    def __eq__(self, other) -> bool:
        if not isinstance(other, Panel):
            return NotImplemented
        return (
            self.dates == other.dates
            and self.instruments == other.instruments
            and self.sectors == other.sectors
            and np.array_equal(self.present, other.present)
            and np.array_equal(self.status, other.status)
            and all(
                np.array_equal(getattr(self, a)[self.present], getattr(other, a)[other.present])
                for a in ("open", "high", "low", "close", "volume", "turnover", "market_cap")
            )
        )

    def __hash__(self):
        return id(self)

    # -- construction ---------------------------------------------------

    @classmethod
    def from_bars(cls, bars: list[DailyBar]) -> "Panel":
        if not bars:
            raise DataError("cannot build a panel from zero bars")
        seen: set[tuple[str, dt.date]] = set()
        for b in bars:
            key = (b.instrument_id, b.date)
            if key in seen:
                raise DataError(f"duplicate (instrument, date) pair {key}")
            seen.add(key)
        dates = sorted({b.date for b in bars})
        instruments = sorted({b.instrument_id for b in bars})
        didx = {d: t for t, d in enumerate(dates)}
        iidx = {s: i for i, s in enumerate(instruments)}
        T, N = len(dates), len(instruments)
        shape = (T, N)
        open_ = np.full(shape, np.nan)
        high = np.full(shape, np.nan)
        low = np.full(shape, np.nan)
        close = np.full(shape, np.nan)
        volume = np.zeros(shape)
        turnover = np.zeros(shape)
        market_cap = np.full(shape, np.nan)
        status = np.zeros(shape, dtype=np.uint8)
        present = np.zeros(shape, dtype=bool)
        sectors = [""] * N
        for b in bars:
            t, i = didx[b.date], iidx[b.instrument_id]
            open_[t, i] = b.open
            high[t, i] = b.high
            low[t, i] = b.low
            close[t, i] = b.close
            volume[t, i] = b.volume
            turnover[t, i] = b.turnover
            market_cap[t, i] = b.market_cap
            status[t, i] = int(b.status)
            present[t, i] = True
            if sectors[i] and sectors[i] != b.sector:
                raise DataError(f"instrument {b.instrument_id!r} has inconsistent sectors")
            sectors[i] = b.sector
        return cls(
            dates, instruments, sectors, open_, high, low, close, volume, turnover, market_cap, status, present
        )

    def _validate(self) -> None:
        if len(self.dates) != len(set(self.dates)):
            raise DataError("panel calendar contains duplicate dates")
        if list(self.dates) != sorted(self.dates):
            raise DataError("panel calendar is not strictly increasing")
        shape = (self.n_days, self.n_instruments)
        for a in ("open", "high", "low", "close", "volume", "turnover", "market_cap", "status", "present"):
            if getattr(self, a).shape != shape:
                raise DataError(f"panel array {a} has shape {getattr(self, a).shape}, expected {shape}")


# -- CSV ingestion ------------------------------------------------------


def load_panel(path, schema: dict[str, str] | None = None) -> Panel:
    """Load a panel from CSV.

    `schema` optionally maps the canonical column names to the file's
    actual header names. Malformed rows are collected and reported with
    their 1-based line numbers in a single DataError.
    """
    colmap = {c: c for c in CSV_COLUMNS}
    if schema:
        colmap.update(schema)
    try:
        fh = open(path, newline="")
    except OSError as e:
        raise DataError(f"cannot open panel file {path}: {e}") from e
    with fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in CSV_COLUMNS if colmap[c] not in header]
        if missing:
            raise SchemaError(f"missing required columns: {', '.join(colmap[c] for c in missing)}")
        bars: list[DailyBar] = []
        problems: list[str] = []
        seen: set[tuple[str, dt.date]] = set()
        last_date: dict[str, dt.date] = {}
        for lineno, row in enumerate(reader, start=2):
            try:
                bar = DailyBar(
                    instrument_id=row[colmap["instrument_id"]].strip(),
                    date=dt.date.fromisoformat(row[colmap["date"]].strip()),
                    open=float(row[colmap["open"]]),
                    high=float(row[colmap["high"]]),
                    low=float(row[colmap["low"]]),
                    close=float(row[colmap["close"]]),
                    volume=float(row[colmap["volume"]]),
                    turnover=float(row[colmap["turnover"]]),
                    market_cap=float(row[colmap["market_cap"]]),
                    sector=row[colmap["sector"]].strip(),
                    status=_STATUS_FROM_NAME.get(row[colmap["status"]].strip(), None),
                )
            except (ValueError, TypeError, KeyError) as e:
                problems.append(f"line {lineno}: unparseable row ({e})")
                continue
            if bar.status is None:
                problems.append(f"line {lineno}: unknown status {row[colmap['status']]!r}")
                continue
            bad = bar.violations()
            if bad:
                problems.append(f"line {lineno}: {'; '.join(bad)}")
                continue
            key = (bar.instrument_id, bar.date)
            if key in seen:
                problems.append(f"line {lineno}: duplicate (instrument, date) {key}")
                continue
            seen.add(key)
            prev = last_date.get(bar.instrument_id)
            if prev is not None and bar.date <= prev:
                problems.append(
                    f"line {lineno}: non-monotone dates for {bar.instrument_id!r} ({bar.date} after {prev})"
                )
                continue
            last_date[bar.instrument_id] = bar.date
            bars.append(bar)
        if problems:
            head = problems[:20]
            more = f" (+{len(problems) - 20} more)" if len(problems) > 20 else ""
            raise DataError("malformed rows: " + " | ".join(head) + more)
        return Panel.from_bars(bars)


# -- synthetic generation -----------------------------------------------


@dataclass(frozen=True)
class GeneratorConfig:
    """Settings for the synthetic panel generator.

    Prices follow a regime-switching geometric process: a 3-state
    market volatility regime scales market, sector, and idiosyncratic
    shocks, with seeded overnight gaps, suspensions, and ST flags so
    downstream filters and regime models have something to detect.
    """

    n_instruments: int = 100
    n_days: int = 750
    n_sectors: int = 8
    start_date: dt.date = dt.date(2018, 1, 2)
    base_drift: float = 0.06
    vol_multiplier: float = 1.0
    suspension_rate: float = 0.01
    st_fraction: float = 0.02
    late_listing_fraction: float = 0.05
    regime_vol_scale: tuple[float, float, float] = (0.6, 1.0, 1.9)
    regime_stay_prob: float = 0.985

    def validate(self) -> None:
        if self.n_instruments < 1:
            raise ConfigError("generator requires n_instruments >= 1")
        if self.n_days < 1:
            raise ConfigError("generator requires n_days >= 1")
        if not 1 <= self.n_sectors <= len(SECTORS):
            raise ConfigError(f"generator requires 1..{len(SECTORS)} sectors, got {self.n_sectors}")
        if self.vol_multiplier < 0:
            raise ConfigError("vol_multiplier must be >= 0")


def trading_calendar(start: dt.date, n_days: int) -> list[dt.date]:
    """Weekday calendar of n_days trading days starting at or after start."""
    out: list[dt.date] = []
    d = start
    while len(out) < n_days:
        if d.weekday() < 5:
            out.append(d)
        d += dt.timedelta(days=1)
    return out


def generate_synthetic_panel(config: GeneratorConfig, seed: int) -> Panel:
    """Deterministic synthetic daily panel; identical (config, seed) gives identical output."""
    config.validate()
    rng = substream(seed, "synthetic-panel")
    N, T = config.n_instruments, config.n_days
    vm = config.vol_multiplier
    dates = trading_calendar(config.start_date, T)
    instruments = [f"SYN{i:04d}" for i in range(N)]
    sector_ids = np.arange(N) % config.n_sectors
    sectors = [SECTORS[k] for k in sector_ids]

    # latent 3-state volatility regime (market-wide Markov chain)
    stay = config.regime_stay_prob
    regime = np.zeros(T, dtype=np.int64)
    regime[0] = 1
    draws = rng.uniform(size=T)
    for t in range(1, T):
        if draws[t] < stay:
            regime[t] = regime[t - 1]
        else:
            regime[t] = (regime[t - 1] + (1 if draws[t] < stay + (1 - stay) / 2 else 2)) % 3
    scale_t = np.asarray(config.regime_vol_scale)[regime]

    drift = (config.base_drift + rng.uniform(-0.04, 0.04, size=N)) / 252.0
    beta_m = rng.normal(1.0, 0.2, size=N)
    beta_s = rng.normal(1.0, 0.25, size=N)
    idio = rng.uniform(0.008, 0.022, size=N)

    mkt_shock = rng.normal(0.0, 0.009, size=T)
    sec_shock = rng.normal(0.0, 0.006, size=(T, config.n_sectors))
    idio_shock = rng.normal(0.0, 1.0, size=(T, N))
    gap_shock = rng.normal(0.0, 0.004, size=(T, N))
    shadow_up = np.abs(rng.normal(0.0, 0.006, size=(T, N)))
    shadow_dn = np.abs(rng.normal(0.0, 0.006, size=(T, N)))

    noise = (
        beta_m[None, :] * mkt_shock[:, None]
        + beta_s[None, :] * sec_shock[:, sector_ids]
        + idio[None, :] * idio_shock
    )
    log_ret = drift[None, :] + vm * scale_t[:, None] * noise

    init_price = rng.uniform(8.0, 80.0, size=N)
    log_close = np.cumsum(log_ret, axis=0) + np.log(init_price)
    close = np.exp(log_close)
    prev_close = np.vstack([init_price, close[:-1]])
    open_ = prev_close * np.exp(vm * scale_t[:, None] * gap_shock)
    hi_base = np.maximum(open_, close)
    lo_base = np.minimum(open_, close)
    high = hi_base * np.exp(vm * scale_t[:, None] * shadow_up)
    low = lo_base * np.exp(-vm * scale_t[:, None] * shadow_dn)

    base_vol = rng.lognormal(mean=13.5, sigma=0.9, size=N)
    vol_noise = rng.lognormal(mean=0.0, sigma=0.35, size=(T, N))
    volume = base_vol[None, :] * (1.0 + 12.0 * np.abs(log_ret)) * vol_noise
    shares_out = rng.lognormal(mean=18.0, sigma=0.8, size=N)
    market_cap = shares_out[None, :] * close
    turnover = volume * close

    status = np.zeros((T, N), dtype=np.uint8)
    present = np.ones((T, N), dtype=bool)

    # late listings: a fraction of instruments starts partway through
    n_late = int(round(config.late_listing_fraction * N))
    if n_late and T > 300:
        late_ids = rng.choice(N, size=n_late, replace=False)
        for i in late_ids:
            start_t = int(rng.integers(1, max(2, T // 3)))
            present[:start_t, i] = False

    # suspension spells: flat carried close, volume 0
    if config.suspension_rate > 0:
        n_susp = int(round(config.suspension_rate * N))
        susp_ids = rng.choice(N, size=n_susp, replace=False) if n_susp else []
        for i in susp_ids:
            n_spells = int(rng.integers(1, 3))
            for _ in range(n_spells):
                if T < 30:
                    continue
                s = int(rng.integers(10, T - 15))
                length = int(rng.integers(3, 12))
                e = min(s + length, T)
                status[s:e, i] = int(Status.SUSPENDED)
    # ST designations: a block of days flagged SpecialTreatment (still trading)
    n_st = int(round(config.st_fraction * N))
    if n_st and T > 60:
        st_ids = rng.choice(N, size=n_st, replace=False)
        for i in st_ids:
            s = int(rng.integers(0, T // 2))
            status[s : min(s + 120, T), i] = int(Status.SPECIAL_TREATMENT)

    # volume must be positive exactly on non-suspended days
    volume = np.round(volume)
    volume[volume == 0] = 100.0

    # suspension spells carry the last traded close; the latent path
    # resumes afterwards so the gap return accumulates at resume
    for i in range(N):
        for t in range(T):
            if not present[t, i] or status[t, i] != int(Status.SUSPENDED):
                continue
            if t > 0 and present[t - 1, i]:
                carried = float(close[t - 1, i])
            else:
                carried = float(open_[t, i])
            open_[t, i] = high[t, i] = low[t, i] = close[t, i] = carried
            volume[t, i] = 0.0
            market_cap[t, i] = shares_out[i] * carried
    turnover = np.where(status == int(Status.SUSPENDED), 0.0, volume * close)

    return Panel(
        dates,
        instruments,
        sectors,
        open_,
        high,
        low,
        close,
        volume,
        turnover,
        market_cap,
        status,
        present,
    )


# -- universe filtering --------------------------------------------------


def build_universe(panel: Panel, date: dt.date, rules: UniverseRules | None = None) -> UniverseSnapshot:
    """Instruments tradable on `date` under the filter thresholds.

    Uses only bars dated <= date. An instrument passes when it is
    present and Normal on the date, has at least `min_history_days`
    prior trading days, meets the market-cap and mean-turnover floors,
    and had no 1-day move beyond `max_abs_return` in the recent window.
    """
    rules = rules or UniverseRules()
    t = panel.date_index(date)
    members: set[str] = set()
    w = rules.turnover_window
    xw = rules.extreme_window
    for i, inst in enumerate(panel.instruments):
        if not panel.present[t, i]:
            continue
        if panel.status[t, i] != int(Status.NORMAL):
            continue
        if t - panel.first_present[i] < rules.min_history_days:
            continue
        if panel.market_cap[t, i] < rules.min_market_cap:
            continue
        lo = max(panel.first_present[i], t - w + 1)
        if np.mean(panel.turnover[lo : t + 1, i]) < rules.min_avg_turnover:
            continue
        xlo = max(panel.first_present[i] + 1, t - xw + 1)
        if xlo <= t:
            closes = panel.close[xlo - 1 : t + 1, i]
            with np.errstate(invalid="ignore", divide="ignore"):
                rets = closes[1:] / closes[:-1] - 1.0
            if np.any(np.abs(rets) > rules.max_abs_return):
                continue
        members.add(inst)
    return UniverseSnapshot(date=date, members=frozenset(members))


def market_return_series(panel: Panel) -> np.ndarray:
    """Equal-weight mean daily return across present instruments, (T,)."""
    rets = panel.simple_returns()
    ok = ~np.isnan(rets)
    counts = ok.sum(axis=1)
    sums = np.where(ok, rets, 0.0).sum(axis=1)
    return np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
