"""Cross-sectional feature construction and preprocessing.

Preprocessing order is fixed: raw -> winsorize -> sector-neutral
standardize -> decayed forward fill. Every feature at date t reads
bars dated <= t only, so the pipeline is a pure function of the panel
truncated at t.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass

import numpy as np

from .marketdata import Panel, Status, UniverseSnapshot

FEATURE_NAMES = (
    "mom_5",
    "mom_10",
    "mom_20",
    "mom_60",
    "rev_5",
    "vol_10",
    "vol_20",
    "vol_60",
    "volratio_5",
    "volratio_20",
    "turnover_rate",
    "turnover_mean_20",
    "gap",
    "gap_abs_mean_5",
    "log_mcap",
    "volskew_20",
    "rsi_6",
    "rsi_14",
    "macd",
    "macd_signal",
    "macd_hist",
    "range_pos_20",
    "close_to_high_20",
    "amihud_20",
    "retskew_20",
    "retkurt_20",
    "hl_range_10",
    "pv_corr_20",
)

HISTORY_DAYS = 61  # longest lookback any feature needs, including the date itself


@dataclass
class FeaturePanel:
    """One date's instrument-by-feature matrix with a missing mask.

    `values` is NaN exactly where `missing` is True.
    """

    date: dt.date
    instruments: tuple[str, ...]
    feature_names: tuple[str, ...]
    values: np.ndarray
    missing: np.ndarray

    def copy(self) -> "FeaturePanel":
        return FeaturePanel(
            self.date, self.instruments, self.feature_names, self.values.copy(), self.missing.copy()
        )

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.feature_names.index(name)]

    def to_csv(self, path) -> None:
        """Inspection dump: one row per instrument, blank cells where missing."""
        with open(path, "w") as fh:
            fh.write("instrument_id," + ",".join(self.feature_names) + "\n")
            for i, inst in enumerate(self.instruments):
                cells = [
                    "" if self.missing[i, j] else repr(float(self.values[i, j]))
                    for j in range(len(self.feature_names))
                ]
                fh.write(inst + "," + ",".join(cells) + "\n")


def _pop_std(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean((x - np.mean(x)) ** 2)))


def _skew(x: np.ndarray) -> float:
    s = _pop_std(x)
    if s == 0:
        return 0.0
    return float(np.mean(((x - np.mean(x)) / s) ** 3))


def _kurt(x: np.ndarray) -> float:
    s = _pop_std(x)
    if s == 0:
        return 0.0
    return float(np.mean(((x - np.mean(x)) / s) ** 4) - 3.0)


def _ema(x: np.ndarray, span: int) -> np.ndarray:
    alpha = 2.0 / (span + 1.0)
    out = np.empty_like(x)
    out[0] = x[0]
    for k in range(1, len(x)):
        out[k] = alpha * x[k] + (1 - alpha) * out[k - 1]
    return out


def _rsi(closes: np.ndarray, window: int) -> float:
    diffs = np.diff(closes[-(window + 1) :])
    gains = np.clip(diffs, 0, None)
    losses = np.clip(-diffs, 0, None)
    mg, ml = np.mean(gains), np.mean(losses)
    if mg == 0 and ml == 0:
        return 50.0
    if ml == 0:
        return 100.0
    return 100.0 - 100.0 / (1.0 + mg / ml)


def compute_raw_features(panel: Panel, date: dt.date, universe: UniverseSnapshot) -> FeaturePanel:
    """Raw feature matrix for the universe members at `date`.

    Insufficient history marks the feature missing rather than raising.
    Universe membership guarantees at least 252 prior days, so with the
    61-day lookback only degenerate cases (suspension on the date, zero
    denominators) produce missing entries.
    """
    members = sorted(universe.members)
    t = panel.date_index(date)
    n, k = len(members), len(FEATURE_NAMES)
    values = np.full((n, k), np.nan)
    col = {name: j for j, name in enumerate(FEATURE_NAMES)}

    for row, inst in enumerate(members):
        i = panel.instrument_index(inst)
        lo = t - (HISTORY_DAYS - 1)
        if lo < panel.first_present[i]:
            continue  # not enough history: everything stays missing
        closes = panel.close[lo : t + 1, i]
        highs = panel.high[lo : t + 1, i]
        lows = panel.low[lo : t + 1, i]
        opens = panel.open[lo : t + 1, i]
        vols = panel.volume[lo : t + 1, i]
        tovs = panel.turnover[lo : t + 1, i]
        rets = closes[1:] / closes[:-1] - 1.0

        for h in (5, 10, 20, 60):
            values[row, col[f"mom_{h}"]] = closes[-1] / closes[-1 - h] - 1.0
        values[row, col["rev_5"]] = -(closes[-1] / closes[-6] - 1.0)
        for h in (10, 20, 60):
            values[row, col[f"vol_{h}"]] = _pop_std(rets[-h:])
        for h in (5, 20):
            mv = np.mean(vols[-1 - h : -1])
            if mv > 0:
                values[row, col[f"volratio_{h}"]] = vols[-1] / mv
        mcap = panel.market_cap[t, i]
        values[row, col["turnover_rate"]] = tovs[-1] / mcap
        values[row, col["turnover_mean_20"]] = np.mean(tovs[-20:]) / mcap
        if panel.status[t, i] != int(Status.SUSPENDED):
            values[row, col["gap"]] = opens[-1] / closes[-2] - 1.0
        gaps5 = opens[-5:] / closes[-6:-1] - 1.0
        values[row, col["gap_abs_mean_5"]] = np.mean(np.abs(gaps5))
        values[row, col["log_mcap"]] = np.log(mcap)
        values[row, col["volskew_20"]] = _skew(vols[-20:])
        values[row, col["rsi_6"]] = _rsi(closes, 6)
        values[row, col["rsi_14"]] = _rsi(closes, 14)
        ema12 = _ema(closes, 12)
        ema26 = _ema(closes, 26)
        macd_line = (ema12 - ema26) / closes[-1]
        signal = _ema(macd_line, 9)
        values[row, col["macd"]] = macd_line[-1]
        values[row, col["macd_signal"]] = signal[-1]
        values[row, col["macd_hist"]] = macd_line[-1] - signal[-1]
        hi20, lo20 = np.max(highs[-20:]), np.min(lows[-20:])
        span = hi20 - lo20
        values[row, col["range_pos_20"]] = (closes[-1] - lo20) / span if span > 0 else 0.5
        values[row, col["close_to_high_20"]] = closes[-1] / hi20 - 1.0
        tv20 = tovs[-20:]
        valid = tv20 > 0
        if np.any(valid):
            values[row, col["amihud_20"]] = float(np.mean(np.abs(rets[-20:][valid]) / tv20[valid])) * 1e9
        values[row, col["retskew_20"]] = _skew(rets[-20:])
        values[row, col["retkurt_20"]] = _kurt(rets[-20:])
        values[row, col["hl_range_10"]] = np.mean((highs[-10:] - lows[-10:]) / closes[-10:])
        dv = np.diff(vols[-21:])
        r20 = rets[-20:]
        if _pop_std(dv) > 0 and _pop_std(r20) > 0:
            values[row, col["pv_corr_20"]] = float(np.corrcoef(r20, dv)[0, 1])
        else:
            values[row, col["pv_corr_20"]] = 0.0

    missing = np.isnan(values)
    return FeaturePanel(date, tuple(members), FEATURE_NAMES, values, missing)


def winsorize(features: FeaturePanel, lower: float = 0.01, upper: float = 0.99) -> FeaturePanel:
    """Clamp each column to its cross-sectional empirical quantiles.

    Bounds are order statistics (next-higher for the lower bound,
    next-lower for the upper) rather than interpolated quantiles:
    interpolation would shift under its own clamp and break
    idempotence. Missing entries are untouched.
    """
    if not 0 <= lower < upper <= 1:
        raise ValueError(f"need 0 <= lower < upper <= 1, got ({lower}, {upper})")
    out = features.copy()
    for j in range(out.values.shape[1]):
        colv = out.values[:, j]
        ok = ~out.missing[:, j]
        if not np.any(ok):
            continue
        lo = np.quantile(colv[ok], lower, method="higher")
        hi = np.quantile(colv[ok], upper, method="lower")
        if lo > hi:
            lo = hi = np.quantile(colv[ok], 0.5, method="lower")
        colv[ok] = np.clip(colv[ok], lo, hi)
    return out


def sector_standardize(
    features: FeaturePanel, sectors: dict[str, str], epsilon: float = 1e-8
) -> FeaturePanel:
    """Per-sector z-score each column: (x - mu_sector) / (sigma_sector + epsilon).

    sigma is the population standard deviation over non-missing members
    of the sector on this date. A single-member sector maps to 0, even
    at epsilon 0, because the numerator vanishes exactly.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    out = features.copy()
    labels = np.array([sectors[inst] for inst in out.instruments])
    for sec in np.unique(labels):
        rows = labels == sec
        for j in range(out.values.shape[1]):
            ok = rows & ~out.missing[:, j]
            if not np.any(ok):
                continue
            vals = out.values[ok, j]
            centered = vals - float(np.mean(vals))
            denom = _pop_std(vals) + epsilon
            out.values[ok, j] = np.divide(centered, denom) if denom > 0 else np.zeros_like(centered)
    return out


def forward_fill_decay(history: list[FeaturePanel], halflife: float = 5.0) -> FeaturePanel:
    """Fill the latest panel's missing entries from past observations.

    `history` is a chronological list of consecutive-date panels ending
    at the panel to fill. A missing value is replaced by its most
    recent observation scaled by 0.5**(gap/halflife); observations more
    than 5*halflife days old stay missing. The missing mask of filled
    entries is cleared.
    """
    if halflife <= 0:
        raise ValueError("halflife must be > 0")
    if not history:
        raise ValueError("history must contain at least the current panel")
    out = history[-1].copy()
    max_gap = 5.0 * halflife
    fidx = {name: j for j, name in enumerate(out.feature_names)}
    for row, inst in enumerate(out.instruments):
        miss_cols = np.flatnonzero(out.missing[row])
        for j in miss_cols:
            name = out.feature_names[j]
            for gap in range(1, len(history)):
                past = history[-1 - gap]
                if gap > max_gap:
                    break
                try:
                    prow = past.instruments.index(inst)
                except ValueError:
                    continue
                pj = fidx.get(name)
                if pj is None or past.missing[prow, pj]:
                    continue
                out.values[row, j] = past.values[prow, pj] * 0.5 ** (gap / halflife)
                out.missing[row, j] = False
                break
    return out


def preprocess(
    panel: Panel,
    date: dt.date,
    universe: UniverseSnapshot,
    sectors: dict[str, str],
    history: list[FeaturePanel] | None = None,
    winsor_lower: float = 0.01,
    winsor_upper: float = 0.99,
    epsilon: float = 1e-8,
    halflife: float = 5.0,
) -> FeaturePanel:
    """Full pipeline for one date: raw -> winsorize -> standardize -> fill."""
    fp = compute_raw_features(panel, date, universe)
    fp = winsorize(fp, winsor_lower, winsor_upper)
    fp = sector_standardize(fp, sectors, epsilon)
    if history:
        fp = forward_fill_decay(list(history) + [fp], halflife)
    return fp
