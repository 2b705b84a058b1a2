"""Daily-rebalance backtest engine wiring the full pipeline.

Each test date runs, in order: exit checks on held positions (fills at
rule prices intraday, time stops at the close), cross-sectional
prediction from the previous date's features, opening-signal gating,
constrained sizing of new entries, stress scaling, and the timing
filter, with entry fills at the day's open. Exits release cash before
entries consume it. Trades are recorded at base fill prices with all
four cost components charged separately so the cash identity
equity_t = cash_t + sum(shares * close_t) holds exactly.

Everything stochastic draws from named substreams of the run seed, so
a report is a pure function of (panel, config, seed).
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import crosssection, features, opening, sizing, timing
from .config import CostConfig, RunConfig, config_echo, resolve_index
from .errors import ConfigError, DataError, FitError, InfeasibleError
from .exitgrid import (
    EntryRecord,
    ExitParams,
    ExitReason,
    ViterbiDecoder,
    argmax_objective,
    check_day,
    enumerate_grid,
    evaluate_grid,
    fit_regime_hmm,
    optimize_per_regime,
    smooth_params,
    viterbi_regime,
)
from .marketdata import Panel, Status, UniverseSnapshot, build_universe, market_return_series
from .seeds import substream
from .volatility import (
    GarchParams,
    KalmanCombiner,
    SvFilter,
    SvModel,
    annualized_mean_vol,
    fit_garch,
    stress_index,
)

TRADING_DAYS = 252.0


@dataclass(frozen=True)
class CostModel:
    commission_bps: float = 5.0
    stamp_bps: float = 10.0
    spread_bps: float = 2.1
    impact_coeff: float = 0.5
    stamp_both_sides: bool = False

    @classmethod
    def from_config(cls, c: CostConfig) -> "CostModel":
        return cls(c.commission_bps, c.stamp_bps, c.spread_bps, c.impact_coeff, c.stamp_both_sides)

    def fixed_round_trip_rate(self) -> float:
        """Flat per-notional cost of a buy+sell pair, excluding impact."""
        stamp = self.stamp_bps * (2.0 if self.stamp_both_sides else 1.0)
        return (2.0 * self.commission_bps + stamp + 2.0 * self.spread_bps) / 1e4


@dataclass(frozen=True)
class TradeIntent:
    instrument_id: str
    side: str  # "buy" | "sell"
    date: dt.date
    shares: float
    price: float
    adv_shares: float
    volatility: float  # daily


@dataclass(frozen=True)
class TradeRecord:
    instrument_id: str
    side: str
    date: dt.date
    shares: float
    price: float
    commission: float
    stamp_tax: float
    impact_cost: float
    spread_cost: float
    reason: ExitReason

    @property
    def notional(self) -> float:
        return self.shares * self.price

    @property
    def total_costs(self) -> float:
        return self.commission + self.stamp_tax + self.impact_cost + self.spread_cost


@dataclass(frozen=True)
class ClosedTrade:
    instrument_id: str
    entry_date: dt.date
    exit_date: dt.date
    shares: float
    entry_price: float
    exit_price: float
    costs: float
    reason: ExitReason
    holding_days: int
    max_hold: int
    flags: tuple[str, ...] = ()

    @property
    def net_pnl(self) -> float:
        return (self.exit_price - self.entry_price) * self.shares - self.costs


@dataclass
class Position:
    instrument_id: str
    shares: float
    entry_idx: int
    entry_date: dt.date
    entry_price: float
    high_water: float
    exit_params: ExitParams
    entry_costs: float
    flags: tuple[str, ...] = ()


@dataclass
class PortfolioState:
    date: dt.date
    cash: float
    positions: dict[str, Position]
    equity: float


@dataclass
class BacktestReport:
    label: str
    seed: int
    config: dict
    dates: list[dt.date]
    equity: list[float]
    initial_equity: float
    trades: list[TradeRecord]
    closed_trades: list[ClosedTrade]
    metrics: dict
    cost_breakdown: dict[str, float]
    regime_by_date: list[int]
    regime_table: dict
    grid_table: list[tuple[ExitParams, float | None]] = field(default_factory=list)
    open_positions: int = 0
    flags: list[str] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    @property
    def daily_returns(self) -> np.ndarray:
        eq = np.concatenate([[self.initial_equity], np.asarray(self.equity)])
        return eq[1:] / eq[:-1] - 1.0


# -- cost model ----------------------------------------------------------------


def market_impact(shares: float, adv_shares: float, volatility: float, side: int) -> float:
    """Signed square-root-law impact fraction of price.

    The cost is charged adversely to the trader whichever the sign:
    buys fill effectively higher, sells lower, by |impact| of notional.
    """
    if adv_shares <= 0:
        raise ValueError("adv_shares must be positive")
    if shares < 0:
        raise ValueError("shares must be >= 0")
    sign = 1 if side >= 0 else -1
    return 0.5 * math.sqrt(shares / adv_shares) * volatility * sign


def apply_costs(intent: TradeIntent, model: CostModel) -> TradeRecord:
    """Record a fill at the base price with all cost components explicit."""
    if intent.shares * intent.price <= 0:
        raise ValueError("trade notional must be positive")
    notional = intent.shares * intent.price
    commission = notional * model.commission_bps / 1e4
    if intent.side == "sell" or model.stamp_both_sides:
        stamp = notional * model.stamp_bps / 1e4
    else:
        stamp = 0.0
    spread = notional * model.spread_bps / 1e4
    impact_frac = abs(
        market_impact(intent.shares, intent.adv_shares, intent.volatility, 1)
    ) * (model.impact_coeff / 0.5)
    impact = notional * impact_frac
    return TradeRecord(
        instrument_id=intent.instrument_id,
        side=intent.side,
        date=intent.date,
        shares=intent.shares,
        price=intent.price,
        commission=commission,
        stamp_tax=stamp,
        impact_cost=impact,
        spread_cost=spread,
        reason=ExitReason.ENTRY,
    )


# -- metrics -------------------------------------------------------------------


def compute_metrics(
    dates: list[dt.date],
    equity: list[float],
    initial_equity: float,
    closed_trades: list[ClosedTrade],
    trades: list[TradeRecord],
    risk_free: float = 0.02,
) -> dict:
    """Performance table; degenerate denominators yield None with a flag."""
    if len(equity) < 2:
        raise DataError("metrics require at least 2 equity points")
    eq = np.concatenate([[initial_equity], np.asarray(equity, dtype=float)])
    rets = eq[1:] / eq[:-1] - 1.0
    n = len(rets)
    flags: list[str] = []

    years = n / TRADING_DAYS
    ann_return = (eq[-1] / eq[0]) ** (1.0 / years) - 1.0 if eq[-1] > 0 else -1.0
    vol = float(np.std(rets, ddof=1)) * math.sqrt(TRADING_DAYS)
    peaks = np.maximum.accumulate(eq)
    max_dd = float(np.max(1.0 - eq / peaks))

    if vol <= 1e-12:
        sharpe = None
        flags.append("volatility_degenerate")
    else:
        sharpe = (ann_return - risk_free) / vol
    rf_daily = risk_free / TRADING_DAYS
    downside = np.minimum(rets - rf_daily, 0.0)
    dd_dev = float(np.sqrt(np.mean(downside**2))) * math.sqrt(TRADING_DAYS)
    if dd_dev <= 1e-12:
        sortino = None
        flags.append("sortino_degenerate")
    else:
        sortino = (ann_return - risk_free) / dd_dev
    if max_dd <= 1e-12:
        calmar = None
        flags.append("calmar_undefined")
    else:
        calmar = ann_return / max_dd

    var95 = float(np.percentile(rets, 5.0))
    tail = rets[rets <= var95]
    es = float(np.mean(tail)) if tail.size else var95
    max_daily_loss = float(np.min(rets))

    if closed_trades:
        win_rate = float(np.mean([1.0 if tr.net_pnl > 0 else 0.0 for tr in closed_trades]))
        avg_hold = float(np.mean([tr.holding_days for tr in closed_trades]))
    else:
        win_rate = None
        avg_hold = None
        flags.append("no_closed_trades")
    traded_notional = float(sum(t.notional for t in trades))
    mean_eq = float(np.mean(eq))
    annual_turnover = traded_notional / mean_eq * (TRADING_DAYS / n)

    return {
        "annualized_return": ann_return,
        "annualized_volatility": vol,
        "sharpe": sharpe,
        "sortino": sortino,
        "calmar": calmar,
        "max_drawdown": max_dd,
        "var_95": var95,
        "expected_shortfall": es,
        "max_daily_loss": max_daily_loss,
        "win_rate": win_rate,
        "avg_holding_days": avg_hold,
        "annual_turnover": annual_turnover,
        "n_trades": len(trades),
        "n_closed": len(closed_trades),
        "flags": flags,
    }


# -- pipeline toggles -------------------------------------------------------------


@dataclass(frozen=True)
class PipelineToggles:
    use_network: bool = True
    use_opening: bool = True
    use_sizing: bool = True
    use_grid: bool = True
    use_timing: bool = True


ABLATION_ROWS: list[tuple[str, PipelineToggles]] = [
    ("Baseline (Random)", PipelineToggles(False, False, False, False, False)),
    ("+ Cross-Sectional", PipelineToggles(True, False, False, False, False)),
    ("+ Opening Signals", PipelineToggles(True, True, False, False, False)),
    ("+ Position Sizing", PipelineToggles(True, True, True, False, False)),
    ("+ Grid Optimization", PipelineToggles(True, True, True, True, False)),
    ("+ Market Timing", PipelineToggles(True, True, True, True, True)),
]


# -- engine ------------------------------------------------------------------------


class BacktestEngine:
    """Precomputes shared state once, then runs pipeline variants over the test span."""

    def __init__(self, panel: Panel, config: RunConfig):
        self.panel = panel
        self.cfg = config
        self.cost_model = CostModel.from_config(config.costs)
        T = panel.n_days
        min_start = config.universe.min_history_days + features.HISTORY_DAYS + 5
        self.train_end = resolve_index(panel, config.split.train_end, max(min_start, (2 * T) // 3))
        self.test_start = resolve_index(panel, config.split.test_start, self.train_end + 1)
        self.test_end = resolve_index(panel, config.split.test_end, T - 1)
        if not self.train_end < self.test_start <= self.test_end:
            raise ConfigError(
                f"split must order train_end < test_start <= test_end, got "
                f"{self.train_end}, {self.test_start}, {self.test_end}"
            )
        if self.test_start < min_start:
            raise ConfigError(
                f"test_start index {self.test_start} too early; universe needs {min_start} days of history"
            )
        self.retrain_schedule = list(
            range(self.test_start, self.test_end + 1, max(1, config.split.retrain_every))
        )
        self._universe_cache: dict[int, UniverseSnapshot] = {}
        self._std_fp_cache: dict[int, features.FeaturePanel] = {}
        self._fp_cache: dict[int, features.FeaturePanel] = {}
        self.sectors = dict(zip(panel.instruments, panel.sectors))
        self.market_rets = market_return_series(panel)
        self._vol_ready = False
        self._model: crosssection.TrainedModel | None = None
        self._alpha_by_retrain: dict[int, np.ndarray] | None = None
        self._regime_params: dict[int, ExitParams] | None = None
        self._grid_table: list[tuple[ExitParams, float | None]] = []
        self._timing_model: timing.BoostedEnsemble | None = None
        self._dataset: dict[int, tuple[np.ndarray, np.ndarray]] | None = None
        self.flags: list[str] = []

    # -- shared caches ---------------------------------------------------

    def universe(self, t: int) -> UniverseSnapshot:
        if t not in self._universe_cache:
            self._universe_cache[t] = build_universe(self.panel, self.panel.dates[t], self.cfg.universe)
        return self._universe_cache[t]

    def _std_features(self, t: int) -> features.FeaturePanel:
        if t not in self._std_fp_cache:
            uni = self.universe(t)
            fp = features.compute_raw_features(self.panel, self.panel.dates[t], uni)
            fp = features.winsorize(fp, self.cfg.features.winsor_lower, self.cfg.features.winsor_upper)
            fp = features.sector_standardize(fp, self.sectors, self.cfg.features.epsilon)
            self._std_fp_cache[t] = fp
        return self._std_fp_cache[t]

    def features_at(self, t: int) -> features.FeaturePanel:
        """Preprocessed features at index t with decayed forward fill."""
        if t not in self._fp_cache:
            depth = int(5 * self.cfg.features.fill_halflife)
            history = [self._std_features(s) for s in range(max(0, t - depth), t + 1)]
            self._fp_cache[t] = features.forward_fill_decay(history, self.cfg.features.fill_halflife)
        return self._fp_cache[t]

    # -- volatility stack --------------------------------------------------

    def _ensure_vol_stack(self) -> None:
        if self._vol_ready:
            return
        cfgv = self.cfg.volatility
        panel = self.panel
        T, N = panel.n_days, panel.n_instruments
        rets = np.nan_to_num(panel.simple_returns(), nan=0.0)
        self.vol_start = max(65, self.test_start - cfgv.stress_window - cfgv.warmup_days)
        fit_points = [self.test_start] + self.retrain_schedule[1:]

        self.sigma2_garch = np.zeros((T, N))
        self.sigma2_rv = np.zeros((T, N))
        self.sigma2_sv = np.zeros((T, N))
        self.sigma2_combined = np.zeros((T, N))
        self.vol_active = np.zeros((T, N), dtype=bool)

        r2 = rets**2
        csum = np.cumsum(r2, axis=0)

        for i in range(N):
            start = int(max(self.vol_start, panel.first_present[i] + 2))
            if start >= self.test_end:
                continue
            garch_by_point: dict[int, GarchParams] = {}
            mu_by_point: dict[int, float] = {}
            for p in fit_points:
                lo = int(max(panel.first_present[i] + 1, p - 750))
                window = rets[lo:p, i]
                if len(window) >= 100 and np.std(window) > 0:
                    try:
                        params, _, gflags = fit_garch(window)
                    except (FitError, DataError):
                        params = GarchParams(0.05 * max(np.var(window), 1e-10), 0.05, 0.90)
                        gflags = ("fallback",)
                    if "fallback" in gflags and "garch_fallback" not in self.flags:
                        self.flags.append("garch_fallback")
                else:
                    params = GarchParams(0.05 * max(float(np.var(window)) if len(window) else 1e-8, 1e-10), 0.05, 0.90)
                garch_by_point[p] = params
                rv = float(np.mean(window**2)) if len(window) >= 20 else 1e-6
                mu_by_point[p] = math.log(max(rv, 1e-12))

            first_fit = fit_points[0]
            params = garch_by_point[first_fit]
            warm = rets[max(panel.first_present[i] + 1, start - 60) : start, i]
            uncond = float(np.mean(warm**2)) if len(warm) else 1e-6
            uncond = max(uncond, 1e-12)
            sv = SvFilter(
                SvModel(mu=mu_by_point[first_fit], rho=cfgv.sv_rho, sigma_eta=cfgv.sv_sigma_eta),
                n_particles=max(100, cfgv.sv_particles),
                seed=int(substream(self.cfg.seed, "sv", i).integers(2**31)),
            )
            comb = KalmanCombiner(q=cfgv.kalman_q)
            sig2 = uncond
            prev_comp: np.ndarray | None = None
            prev_ret = 0.0
            for t in range(start, self.test_end + 1):
                for p in fit_points[1:]:
                    if t == p:
                        params = garch_by_point[p]
                        sv.set_model(SvModel(mu=mu_by_point[p], rho=cfgv.sv_rho, sigma_eta=cfgv.sv_sigma_eta))
                # components for date t, built from data through t-1
                r_prev = float(rets[t - 1, i])
                sig2 = params.omega + params.alpha * r_prev**2 + params.beta * sig2
                w = cfgv.rv_window
                if t - w >= 1:
                    rv_t = float((csum[t - 1, i] - csum[t - 1 - w, i]) / w)
                else:
                    rv_t = uncond
                sv_t = sv.step(r_prev)
                comp = np.array([sig2, max(rv_t, 1e-12), max(sv_t, 1e-12)])
                if prev_comp is not None:
                    comb.update(prev_comp, prev_ret**2)
                weights = comb.weights
                self.sigma2_garch[t, i] = sig2
                self.sigma2_rv[t, i] = rv_t
                self.sigma2_sv[t, i] = sv_t
                self.sigma2_combined[t, i] = float(weights @ comp)
                self.vol_active[t, i] = True
                prev_comp = comp
                prev_ret = r_prev

        # market stress levels and regimes
        levels = np.zeros(T)
        for t in range(self.vol_start, self.test_end + 1):
            act = self.vol_active[t]
            levels[t] = annualized_mean_vol(self.sigma2_combined[t, act]) if act.any() else 0.0
        self.stress_levels = levels
        lvl_dates = list(panel.dates)
        self.stress = stress_index(
            lvl_dates[self.vol_start : self.test_end + 1],
            levels[self.vol_start : self.test_end + 1],
            trailing_window=cfgv.stress_window,
        )
        self._stress_by_idx = {self.vol_start + k: s for k, s in enumerate(self.stress)}

        hmm_lo = self.vol_start + 10
        hmm_obs = levels[hmm_lo : self.test_start]
        if len(hmm_obs) >= 100:
            self.hmm, _ = fit_regime_hmm(hmm_obs, seed=int(substream(self.cfg.seed, "hmm").integers(2**31)))
            train_states = viterbi_regime(self.hmm, hmm_obs)
            self.regime_of_train_date = {
                panel.dates[hmm_lo + k]: int(s) for k, s in enumerate(train_states)
            }
            decoder = ViterbiDecoder(self.hmm)
            state_after = {}
            for t in range(hmm_lo, self.test_end + 1):
                state_after[t] = decoder.step(float(levels[t]))
            self.regime_decision = {
                t: state_after[t - 1] for t in range(self.test_start, self.test_end + 1)
            }
        else:
            self.flags.append("hmm_insufficient_history")
            self.hmm = None
            self.regime_of_train_date = {}
            self.regime_decision = {t: 1 for t in range(self.test_start, self.test_end + 1)}
        self._vol_ready = True

    def stress_for_decision(self, t: int):
        """Stress index usable at date t's open (computed through t-1)."""
        return self._stress_by_idx.get(t - 1)

    # -- model training -----------------------------------------------------

    def _ensure_dataset(self) -> None:
        if self._dataset is not None:
            return
        horizon = self.cfg.network.horizon
        ds: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        start = self.cfg.universe.min_history_days + features.HISTORY_DAYS
        for s in range(start, self.test_end + 1 - horizon):
            uni = self.universe(s)
            if len(uni.members) < 2:
                continue
            fp = self.features_at(s)
            idx = [self.panel.instrument_index(m) for m in fp.instruments]
            labels = self.panel.close[s + horizon, idx] / self.panel.close[s, idx] - 1.0
            X = np.where(fp.missing, 0.0, fp.values)
            ds[s] = (X, labels)
        self._dataset = ds

    def _ensure_network(self) -> None:
        if self._model is not None:
            return
        self._ensure_dataset()
        netcfg = replace(
            self.cfg.network,
            layer_dims=(len(features.FEATURE_NAMES),) + tuple(self.cfg.network.layer_dims[1:]),
            seed=self.cfg.seed,
        )
        self._model = crosssection.train_walk_forward(
            self._dataset, self.panel.dates, self.retrain_schedule, netcfg
        )

    def _signal_weight_samples(self, cutoff: int, window: int) -> tuple[np.ndarray, ...]:
        comps, labels, ages = [], [], []
        lo = max(self.cfg.universe.min_history_days, cutoff - window)
        for s in range(lo, cutoff):
            uni = self.universe(s)
            if not uni.members:
                continue
            for m in sorted(uni.members):
                i = self.panel.instrument_index(m)
                sig = opening.compute_opening_signal(
                    self.panel,
                    self.panel.dates[s],
                    m,
                    (1.0, 1.0, 1.0, 1.0),
                    vol=math.sqrt(max(self.sigma2_garch[s, i], 0.0)),
                )
                if sig is None:
                    continue
                comps.append(sig.components)
                labels.append(float(self.panel.close[s, i] / self.panel.open[s, i] - 1.0))
                ages.append(float(cutoff - s))
        return np.asarray(comps), np.asarray(labels), np.asarray(ages)

    def _ensure_alpha_weights(self) -> None:
        if self._alpha_by_retrain is not None:
            return
        self._ensure_vol_stack()
        out: dict[int, np.ndarray] = {}
        for p in self.retrain_schedule:
            comps, labels, ages = self._signal_weight_samples(p, self.cfg.opening.weight_window)
            if len(comps) >= 30:
                alpha, aflags = opening.estimate_signal_weights(
                    comps, labels, ages, decay=self.cfg.opening.decay
                )
                if aflags and "alpha_ridge_fallback" not in self.flags:
                    self.flags.append("alpha_ridge_fallback")
            else:
                alpha = np.array([0.25, 0.25, 0.25, 0.25])
                self.flags.append("alpha_default_weights")
            out[p] = alpha
        self._alpha_by_retrain = out

    def alpha_for(self, t: int) -> np.ndarray:
        self._ensure_alpha_weights()
        best = None
        for p in self.retrain_schedule:
            if p <= t:
                best = p
        return self._alpha_by_retrain[best if best is not None else self.retrain_schedule[0]]

    def _training_entries(self) -> list[EntryRecord]:
        """Representative entry population over the late training span."""
        self._ensure_network()
        params0 = self._model.entries[0][1]
        per_day = self.cfg.grid.entries_per_day
        lo = max(
            self.cfg.universe.min_history_days + features.HISTORY_DAYS + 1,
            self.train_end - self.cfg.grid.window_days,
        )
        entries: list[EntryRecord] = []
        for t in range(lo, self.train_end + 1):
            uni_prev = self.universe(t - 1)
            if not uni_prev.members:
                continue
            fp = self.features_at(t - 1)
            scores = crosssection.predict_scores(params0, fp)
            scores.sort(key=lambda r: (-r.rank_prob, r.instrument_id))
            picked = 0
            for rs in scores:
                if picked >= per_day:
                    break
                i = self.panel.instrument_index(rs.instrument_id)
                if not self.panel.present[t, i] or self.panel.status[t, i] == int(Status.SUSPENDED):
                    continue
                entries.append(
                    EntryRecord(rs.instrument_id, self.panel.dates[t], float(self.panel.open[t, i]))
                )
                picked += 1
        return entries

    def _ensure_grid(self) -> None:
        if self._regime_params is not None:
            return
        self._ensure_vol_stack()
        entries = self._training_entries()
        cost_rate = self.cost_model.fixed_round_trip_rate()
        if self.cfg.grid.per_regime and self.hmm is not None:
            params_by_regime, rflags, table = optimize_per_regime(
                self.panel,
                entries,
                self.cfg.grid.spec,
                self.cfg.objective,
                self.regime_of_train_date,
                min_regime_days=self.cfg.grid.min_regime_days,
                cost_rate=cost_rate,
            )
            for r, fl in rflags.items():
                if fl:
                    self.flags.append(f"regime_{r}_grid_fallback")
        else:
            grid = enumerate_grid(self.cfg.grid.spec)
            table = evaluate_grid(entries, self.panel, grid, self.cfg.objective, cost_rate)
            best, _ = argmax_objective(table)
            params_by_regime = {r: best for r in range(3)}
        self._regime_params = params_by_regime
        self._grid_table = table

    def _ensure_timing(self) -> None:
        if self._timing_model is not None:
            return
        self._ensure_vol_stack()
        cfg_t = self.cfg.timing
        lo = max(65, self.vol_start + 10)
        hi = self.train_end - cfg_t.label_horizon
        X, y, regs = [], [], []
        for s in range(lo, hi):
            f = timing.build_multiscale_features(self.panel, self.panel.dates[s])
            if f is None:
                continue
            fwd = self.market_rets[s + 1 : s + 1 + cfg_t.label_horizon]
            label = float(np.prod(1.0 + fwd) - 1.0)
            X.append(f.as_array())
            y.append(label)
            regs.append(self.regime_of_train_date.get(self.panel.dates[s], 1))
        if len(y) < 30:
            self.flags.append("timing_insufficient_history")
            self._timing_model = timing.fit_timing_model(
                np.zeros((2, len(timing.TIMING_FEATURES))), np.zeros(2), np.zeros(2), n_trees=0
            )
            return
        self._timing_model = timing.fit_timing_model(
            np.asarray(X),
            np.asarray(y),
            np.asarray(regs),
            n_trees=cfg_t.n_trees,
            depth=cfg_t.depth,
            shrinkage=cfg_t.shrinkage,
            min_regime_samples=cfg_t.min_regime_samples,
        )

    # -- daily loop -----------------------------------------------------------

    def run(self, toggles: PipelineToggles = PipelineToggles(), label: str = "full") -> BacktestReport:
        cfg = self.cfg
        panel = self.panel
        self._ensure_vol_stack()
        if toggles.use_network:
            self._ensure_network()
        if toggles.use_opening:
            self._ensure_alpha_weights()
        if toggles.use_grid:
            self._ensure_grid()
        if toggles.use_timing:
            self._ensure_timing()

        cons = cfg.sizing.constraints
        state = PortfolioState(
            date=panel.dates[self.test_start],
            cash=cfg.engine.initial_equity,
            positions={},
            equity=cfg.engine.initial_equity,
        )
        trades: list[TradeRecord] = []
        closed: list[ClosedTrade] = []
        dates_out: list[dt.date] = []
        equity_out: list[float] = []
        regimes_out: list[int] = []
        run_flags: list[str] = []
        diagnostics: dict = {}
        active_exit = cfg.engine.default_exit
        prev_smoothed: ExitParams | None = None

        for t in range(self.test_start, self.test_end + 1):
            date = panel.dates[t]
            regime = self.regime_decision[t]

            # 1. exits on today's bar (cash released before entries)
            for inst in sorted(state.positions):
                pos = state.positions[inst]
                i = panel.instrument_index(inst)
                if not panel.present[t, i] or panel.status[t, i] == int(Status.SUSPENDED):
                    pos.flags = tuple(set(pos.flags) | {"held_through_suspension"})
                    continue
                offset = t - pos.entry_idx
                hit = check_day(
                    float(panel.high[t, i]),
                    float(panel.low[t, i]),
                    float(panel.close[t, i]),
                    pos.entry_price,
                    pos.high_water,
                    offset,
                    pos.exit_params,
                )
                if hit is None:
                    pos.high_water = max(pos.high_water, float(panel.high[t, i]) / pos.entry_price - 1.0)
                    continue
                price, reason = hit
                adv_sh = self._adv_shares(t, i)
                rec = replace(
                    apply_costs(
                        TradeIntent(inst, "sell", date, pos.shares, price, adv_sh, self._daily_vol(t, i)),
                        self.cost_model,
                    ),
                    reason=reason,
                )
                trades.append(rec)
                state.cash += rec.notional - rec.total_costs
                closed.append(
                    ClosedTrade(
                        instrument_id=inst,
                        entry_date=pos.entry_date,
                        exit_date=date,
                        shares=pos.shares,
                        entry_price=pos.entry_price,
                        exit_price=price,
                        costs=pos.entry_costs + rec.total_costs,
                        reason=reason,
                        holding_days=offset,
                        max_hold=pos.exit_params.max_hold,
                        flags=pos.flags,
                    )
                )
                del state.positions[inst]

            # 2. exit-parameter smoothing for today's entries
            if toggles.use_grid:
                regime_params = self._regime_params[regime]
                if prev_smoothed is None:
                    prev_smoothed = regime_params
                active_exit = smooth_params(regime_params, prev_smoothed)
                prev_smoothed = active_exit
            else:
                active_exit = cfg.engine.default_exit

            # 3. entry candidates scored on yesterday's features
            open_est = {
                inst: float(panel.open[t, panel.instrument_index(inst)]) for inst in state.positions
            }
            est_equity = state.cash + sum(
                pos.shares * open_est[inst] for inst, pos in state.positions.items()
            )
            stress = self.stress_for_decision(t)
            stress_z = stress.zscore if stress is not None else 0.0

            new_trades: list[TradeRecord] = []
            selected: list[tuple[str, float]] = []  # (instrument, target weight fraction)
            fp_prev = None
            if t - 1 >= 0 and len(self.universe(t - 1).members) >= 2:
                fp_prev = self.features_at(t - 1)
            if fp_prev is not None and len(fp_prev.instruments) >= 2:
                if toggles.use_network:
                    net_params = self._model.active_params(date)
                    rank_scores = crosssection.predict_scores(net_params, fp_prev)
                else:
                    rng = substream(cfg.seed, "baseline-scores", t)
                    raw = rng.uniform(size=len(fp_prev.instruments))
                    probs = crosssection.rank_probabilities(raw, cfg.network.temperature)
                    rank_scores = [
                        crosssection.RankScore(inst, float(raw[k]), float(probs[k]))
                        for k, inst in enumerate(fp_prev.instruments)
                    ]
                uni_today = self.universe(t).members
                tradable = [
                    rs
                    for rs in rank_scores
                    if rs.instrument_id in uni_today and rs.instrument_id not in state.positions
                ]
                tradable.sort(key=lambda r: (-r.rank_prob, r.instrument_id))

                if toggles.use_opening and tradable:
                    alpha = self.alpha_for(t)
                    sig_by_inst = {}
                    for rs in tradable:
                        i = panel.instrument_index(rs.instrument_id)
                        sig = opening.compute_opening_signal(
                            panel, date, rs.instrument_id, tuple(alpha),
                            vol=math.sqrt(max(self.sigma2_garch[t, i], 0.0)),
                        )
                        if sig is not None:
                            sig_by_inst[rs.instrument_id] = sig
                    values = np.array([s.value for s in sig_by_inst.values()])
                    probs_sorted = sorted(r.rank_prob for r in tradable)
                    psi = float(
                        np.quantile(probs_sorted, cfg.opening.psi_quantile, method="lower")
                    )
                    if len(values) >= cfg.opening.min_signal_samples:
                        gmm, _ = opening.fit_gmm_em(
                            values,
                            lam=cfg.opening.gmm_lambda,
                            seed=int(substream(cfg.seed, "gmm", t).integers(2**31)),
                            max_iter=150,
                            tol=1e-8,
                        )
                        recent = self.market_rets[max(0, t - 5) : t]
                        recent_vol = float(np.sqrt(np.mean(recent**2))) if len(recent) else 0.0
                        thresholds = opening.EntryThresholds.for_date(
                            cfg.opening.theta0, cfg.opening.beta, recent_vol, cfg.opening.phi, psi
                        )
                        passers = [
                            rs
                            for rs in tradable
                            if opening.entry_decision(
                                sig_by_inst.get(rs.instrument_id), gmm, thresholds, rs.rank_prob
                            )
                        ]
                    else:
                        run_flags.append(f"{date}:gmm_insufficient_samples")
                        passers = []
                else:
                    passers = tradable

                max_new = cfg.engine.max_positions - len(state.positions)
                cash_frac = max(0.0, state.cash / est_equity) if est_equity > 0 else 0.0
                invested_frac = 1.0 - cash_frac
                room = max(0.0, cons.budget - invested_frac)
                budget = min(cash_frac * 0.995, room)
                if toggles.use_sizing:
                    selected = self._size_entries(
                        t, passers, budget, max_new, est_equity, stress_z, run_flags, state.positions
                    )
                else:
                    k = min(len(passers), max_new, int(budget / cons.w_min) if cons.w_min > 0 else len(passers))
                    if k > 0:
                        w_each = min(budget / k, cons.w_max)
                        selected = [(rs.instrument_id, w_each) for rs in passers[:k]]

                if toggles.use_timing and selected:
                    f_t = timing.build_multiscale_features(panel, panel.dates[t - 1])
                    if f_t is not None:
                        sig_t = timing.timing_signal(
                            self._timing_model, f_t, regime, cfg.timing.betas, vol_component=-stress_z
                        )
                        selected = [(inst, w * sig_t.exposure_multiplier) for inst, w in selected]
                        if cfg.engine.collect_diagnostics:
                            diagnostics.setdefault(date.isoformat(), {})["timing_multiplier"] = (
                                sig_t.exposure_multiplier
                            )

                # 4. entry fills at today's open
                total_cost = 0.0
                planned = []
                for inst, w in selected:
                    if w <= 1e-9:
                        continue
                    i = panel.instrument_index(inst)
                    price = float(panel.open[t, i])
                    shares = w * est_equity / price
                    intent = TradeIntent(
                        inst, "buy", date, shares, price, self._adv_shares(t, i), self._daily_vol(t, i)
                    )
                    rec = apply_costs(intent, self.cost_model)
                    planned.append((inst, i, rec))
                    total_cost += rec.notional + rec.total_costs
                if planned and total_cost > state.cash:
                    scale = max(0.0, state.cash / total_cost * 0.999)
                    run_flags.append(f"{date}:entries_scaled_to_cash")
                    rescaled = []
                    for inst, i, rec in planned:
                        shares = rec.shares * scale
                        if shares * rec.price <= 0:
                            continue
                        intent = TradeIntent(
                            inst, "buy", date, shares, rec.price, self._adv_shares(t, i), self._daily_vol(t, i)
                        )
                        rescaled.append((inst, i, apply_costs(intent, self.cost_model)))
                    planned = rescaled
                for inst, i, rec in planned:
                    state.cash -= rec.notional + rec.total_costs
                    state.positions[inst] = Position(
                        instrument_id=inst,
                        shares=rec.shares,
                        entry_idx=t,
                        entry_date=date,
                        entry_price=rec.price,
                        high_water=0.0,
                        exit_params=active_exit,
                        entry_costs=rec.total_costs,
                    )
                    new_trades.append(rec)
            trades.extend(new_trades)

            # 5. mark to the close
            state.equity = state.cash + sum(
                pos.shares * float(panel.close[t, panel.instrument_index(inst)])
                for inst, pos in state.positions.items()
            )
            state.date = date
            dates_out.append(date)
            equity_out.append(state.equity)
            regimes_out.append(regime)
            if cfg.engine.collect_diagnostics:
                diag = diagnostics.setdefault(date.isoformat(), {})
                diag["equity"] = state.equity
                diag["stress_z"] = stress_z
                diag["regime"] = regime
                diag["n_positions"] = len(state.positions)
                if fp_prev is not None and toggles.use_network and self._model is not None:
                    diag["scores"] = {
                        rs.instrument_id: rs.raw_score
                        for rs in crosssection.predict_scores(self._model.active_params(date), fp_prev)
                    }
                diag["new_weights"] = {inst: w for inst, w in selected}

        cost_breakdown = {
            "commission": sum(tr.commission for tr in trades),
            "stamp_tax": sum(tr.stamp_tax for tr in trades),
            "impact": sum(tr.impact_cost for tr in trades),
            "spread": sum(tr.spread_cost for tr in trades),
        }
        cost_breakdown["total"] = sum(v for k, v in cost_breakdown.items() if k != "total")
        metrics = compute_metrics(
            dates_out, equity_out, cfg.engine.initial_equity, closed, trades, cfg.engine.risk_free
        )
        report = BacktestReport(
            label=label,
            seed=cfg.seed,
            config=config_echo(cfg),
            dates=dates_out,
            equity=equity_out,
            initial_equity=cfg.engine.initial_equity,
            trades=trades,
            closed_trades=closed,
            metrics=metrics,
            cost_breakdown=cost_breakdown,
            regime_by_date=regimes_out,
            regime_table={},
            grid_table=list(self._grid_table) if toggles.use_grid else [],
            open_positions=len(state.positions),
            flags=self.flags + run_flags,
            diagnostics=diagnostics,
        )
        report.regime_table = regime_report(report, regimes_out)
        return report

    def _adv_shares(self, t: int, i: int) -> float:
        lo = max(int(self.panel.first_present[i]), t - 20)
        adv = float(np.mean(self.panel.volume[lo:t, i])) if t > lo else float(self.panel.volume[t, i])
        return max(adv, 1.0)

    def _daily_vol(self, t: int, i: int) -> float:
        if self.vol_active[t, i]:
            return math.sqrt(max(self.sigma2_combined[t, i], 0.0))
        lo = max(int(self.panel.first_present[i]) + 1, t - 20)
        rets = self.panel.close[lo : t + 1, i] / self.panel.close[lo - 1 : t, i] - 1.0
        return float(np.std(rets)) if len(rets) else 0.01

    def _size_entries(
        self,
        t: int,
        passers: list,
        budget: float,
        max_new: int,
        est_equity: float,
        stress_z: float,
        run_flags: list[str],
        positions: dict[str, Position],
    ) -> list[tuple[str, float]]:
        """Constrained weights for today's entry candidates.

        Held positions (marked at today's open) shrink the sector and
        large-cap room; the budget is whatever cash allows. Candidates
        in full sectors or with nonpositive shifted momentum are
        dropped and flagged.
        """
        cfg = self.cfg
        cons = cfg.sizing.constraints
        panel = self.panel
        date = panel.dates[t]
        if budget < cons.w_min or max_new <= 0 or not passers:
            return []
        k = min(len(passers), max_new, int(budget / cons.w_min))
        if k <= 0:
            return []

        uni = self.universe(t)
        uni_caps = [panel.market_cap[t, panel.instrument_index(m)] for m in sorted(uni.members)]
        lc_threshold = (
            float(np.quantile(uni_caps, 1.0 - cons.largecap_quantile, method="lower"))
            if uni_caps
            else float("inf")
        )

        candidates = []
        skipped_momentum = False
        for rs in passers:
            i = panel.instrument_index(rs.instrument_id)
            mom = float(panel.close[t - 1, i] / panel.close[t - 21, i])  # 1 + 20-day return
            if mom <= 0:
                skipped_momentum = True
                continue
            adv_cur = float(np.mean(panel.turnover[max(0, t - 20) : t, i]))
            if adv_cur <= 0:
                continue
            vol_ann = math.sqrt(max(self.sigma2_combined[t, i], 1e-10) * 252.0)
            target_volume = max(budget / k, cons.w_min) * est_equity
            lam = sizing.liquidity_factor(
                target_volume, adv_cur, cfg.sizing.max_participation, cfg.sizing.inverted_liquidity
            )
            candidates.append((rs, i, mom, adv_cur, vol_ann, lam))
            if len(candidates) >= k:
                break
        if skipped_momentum:
            run_flags.append(f"{date}:momentum_skipped")
        if not candidates:
            return []
        k = len(candidates)
        b_eff = min(budget, k * cons.w_max)
        if b_eff < k * cons.w_min:
            b_eff = k * cons.w_min

        prob_sum = sum(rs.rank_prob for rs, *_ in candidates)
        raws, insts, sectors, lc_mask = [], [], [], []
        for rs, i, mom, adv_cur, vol_ann, lam in candidates:
            score = rs.rank_prob / prob_sum if prob_sum > 0 else 1.0 / k
            inp = sizing.SizingInputs(
                instrument_id=rs.instrument_id,
                score=score,
                market_cap=float(panel.market_cap[t, i]),
                momentum=mom,
                adv=adv_cur,
                volatility=vol_ann,
                target_volume=max(b_eff / k, cons.w_min) * est_equity,
            )
            raws.append(sizing.base_weight(inp, liquidity=lam))
            insts.append(rs.instrument_id)
            sectors.append(panel.sectors[i])
            lc_mask.append(float(panel.market_cap[t, i]) >= lc_threshold)
        raws = np.asarray(raws)
        lc_mask = np.asarray(lc_mask, dtype=bool)

        # sector and large-cap room left by held positions, marked at open
        held_sector: dict[str, float] = {}
        held_lc = 0.0
        for inst, pos in positions.items():
            i = panel.instrument_index(inst)
            w_held = pos.shares * float(panel.open[t, i]) / est_equity if est_equity > 0 else 0.0
            held_sector[panel.sectors[i]] = held_sector.get(panel.sectors[i], 0.0) + w_held
            if float(panel.market_cap[t, i]) >= lc_threshold:
                held_lc += w_held

        sector_caps = {
            s: max(0.0, cons.sector_cap - held_sector.get(s, 0.0)) for s in set(sectors)
        }
        keep = [j for j, s in enumerate(sectors) if sector_caps[s] >= cons.w_min]
        if len(keep) < len(sectors):
            run_flags.append(f"{date}:sector_full_dropped")
        if not keep:
            return []
        raws = raws[keep]
        insts = [insts[j] for j in keep]
        sectors = [sectors[j] for j in keep]
        lc_mask = lc_mask[keep]
        k = len(insts)
        b_eff = min(b_eff, k * cons.w_max)
        if b_eff < k * cons.w_min:
            b_eff = k * cons.w_min

        n_lc = int(lc_mask.sum())
        ach_lo = max(n_lc * cons.w_min, b_eff - (k - n_lc) * cons.w_max)
        ach_hi = min(n_lc * cons.w_max, b_eff - (k - n_lc) * cons.w_min)
        want_lo = max(0.0, cons.largecap_min - held_lc)
        want_hi = max(0.0, cons.largecap_max - held_lc)
        lo = max(ach_lo, min(want_lo, ach_hi))
        hi = min(ach_hi, want_hi)
        if n_lc == 0 or hi <= lo:
            lo, hi = 0.0, b_eff + 1.0  # band inactive
            if n_lc > 0:
                run_flags.append(f"{date}:largecap_band_dropped")
        cons_t = replace(
            cons, budget=b_eff, largecap_min=lo, largecap_max=max(hi, lo + 1e-9), sector_cap=cons.sector_cap
        )
        try:
            pw = sizing.project_constraints(
                raws, cons_t, sectors, lc_mask, instruments=tuple(insts), date=date,
                sector_caps=sector_caps,
            )
        except InfeasibleError:
            run_flags.append(f"{date}:projection_fallback_equal_weight")
            w_each = min(b_eff / k, cons.w_max)
            return [(inst, w_each) for inst in insts]
        stress_obj = self.stress_for_decision(t)
        if stress_obj is not None:
            pw = sizing.volatility_scale(
                pw, stress_obj, w_max=cons.w_max,
                factor_floor=cfg.sizing.scale_floor, factor_cap=cfg.sizing.scale_cap,
            )
        return list(zip(pw.instruments, (float(w) for w in pw.weights)))


# -- public entry points --------------------------------------------------------


def run_backtest(panel: Panel, config: RunConfig, toggles: PipelineToggles | None = None) -> BacktestReport:
    """One full pipeline run; deterministic per (panel, config, seed)."""
    engine = BacktestEngine(panel, config)
    return engine.run(toggles or PipelineToggles(), label="full")


def run_ablation(panel: Panel, config: RunConfig) -> list[BacktestReport]:
    """The six cumulative pipeline configurations, sharing seeds and caches."""
    engine = BacktestEngine(panel, config)
    return [engine.run(toggles, label=label) for label, toggles in ABLATION_ROWS]


def regime_report(report: BacktestReport, regimes: list[int]) -> dict:
    """Per-regime metric sub-tables over the test dates."""
    if len(regimes) != len(report.dates):
        raise DataError("regime sequence must align to the report's dates")
    rets = report.daily_returns
    out: dict = {}
    regs = np.asarray(regimes)
    for r in sorted(set(regimes)):
        mask = regs == r
        n = int(mask.sum())
        if n == 0:
            continue
        sub = rets[mask]
        path = np.cumprod(1.0 + sub)
        peaks = np.maximum.accumulate(np.concatenate([[1.0], path]))
        max_dd = float(np.max(1.0 - np.concatenate([[1.0], path]) / peaks))
        ann = float(path[-1] ** (TRADING_DAYS / n) - 1.0) if path[-1] > 0 else -1.0
        sd = float(np.std(sub, ddof=1)) * math.sqrt(TRADING_DAYS) if n >= 2 else 0.0
        sharpe = (ann - 0.02) / sd if sd > 1e-12 else None
        date_set = {d for d, m in zip(report.dates, mask) if m}
        wins = [tr for tr in report.closed_trades if tr.exit_date in date_set]
        win_rate = float(np.mean([1.0 if tr.net_pnl > 0 else 0.0 for tr in wins])) if wins else None
        out[int(r)] = {
            "days": n,
            "annualized_return": ann,
            "sharpe": sharpe,
            "max_drawdown": max_dd,
            "win_rate": win_rate,
        }
    return out


# -- report files -----------------------------------------------------------------


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_report_files(report: BacktestReport, out_dir: str) -> list[str]:
    """Emit report.json plus the CSV set; returns the paths written."""
    os.makedirs(out_dir, exist_ok=True)
    written = []

    path = os.path.join(out_dir, "report.json")
    payload = {
        "label": report.label,
        "seed": report.seed,
        "config": report.config,
        "metrics": report.metrics,
        "cost_breakdown": report.cost_breakdown,
        "regime_table": {str(k): v for k, v in report.regime_table.items()},
        "open_positions": report.open_positions,
        "initial_equity": report.initial_equity,
        "flags": sorted(set(report.flags)),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    written.append(path)

    path = os.path.join(out_dir, "equity_curve.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "equity", "daily_return", "regime"])
        rets = report.daily_returns
        for k, d in enumerate(report.dates):
            w.writerow([d.isoformat(), _fmt(report.equity[k]), _fmt(float(rets[k])), report.regime_by_date[k]])
    written.append(path)

    path = os.path.join(out_dir, "trades.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(
            ["instrument_id", "side", "date", "shares", "price", "commission", "stamp_tax",
             "impact_cost", "spread_cost", "reason"]
        )
        for tr in report.trades:
            w.writerow(
                [tr.instrument_id, tr.side, tr.date.isoformat(), _fmt(tr.shares), _fmt(tr.price),
                 _fmt(tr.commission), _fmt(tr.stamp_tax), _fmt(tr.impact_cost), _fmt(tr.spread_cost),
                 tr.reason.value]
            )
    written.append(path)

    path = os.path.join(out_dir, "costs.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["component", "total"])
        for k in ("commission", "stamp_tax", "impact", "spread", "total"):
            w.writerow([k, _fmt(report.cost_breakdown[k])])
    written.append(path)

    path = os.path.join(out_dir, "regime_table.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["regime", "days", "annualized_return", "sharpe", "max_drawdown", "win_rate"])
        for r, row in sorted(report.regime_table.items()):
            w.writerow(
                [r, row["days"], _fmt(row["annualized_return"]), _fmt(row["sharpe"]),
                 _fmt(row["max_drawdown"]), _fmt(row["win_rate"])]
            )
    written.append(path)

    path = os.path.join(out_dir, "grid_objective.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["profit_take", "stop_loss", "max_hold", "trailing_activation", "objective"])
        for params, obj in report.grid_table:
            w.writerow(
                [_fmt(params.profit_take), _fmt(params.stop_loss), params.max_hold,
                 _fmt(params.trailing_activation), _fmt(obj)]
            )
    written.append(path)
    return written


def write_ablation_table(reports: list[BacktestReport], out_dir: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "ablation_table.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["configuration", "annualized_return", "sharpe", "max_drawdown", "win_rate"])
        for rep in reports:
            m = rep.metrics
            w.writerow(
                [rep.label, _fmt(m["annualized_return"]), _fmt(m["sharpe"]),
                 _fmt(m["max_drawdown"]), _fmt(m["win_rate"])]
            )
    return path
