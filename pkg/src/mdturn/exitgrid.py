"""Grid-search exit optimization with regime awareness.

Exit rules per held position, evaluated daily from the day after
entry using the day's high/low for intraday touch detection:

1. trailing stop, once the high-water return has reached the
   activation level: exit at entry*(1 + hw - SL) when the low touches it
2. stop loss: exit at entry*(1 - SL) when the low touches it; a
   same-day profit-take collision resolves to the stop loss
3. profit take: exit at entry*(1 + PT) when the high touches it
4. time stop at the max holding period, filled at that day's close

Suspended days cannot trade; a position due to exit rides through the
gap and is flagged. Grid evaluation reduces in lexicographic parameter
order so the argmax never depends on evaluation schedule.
"""

from __future__ import annotations

import datetime as dt
import itertools
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError, FitError
from .marketdata import Panel, Status
from .seeds import substream


class ExitReason(Enum):
    ENTRY = "Entry"
    PROFIT_TAKE = "ProfitTake"
    STOP_LOSS = "StopLoss"
    TRAILING_STOP = "TrailingStop"
    TIME_STOP = "TimeStop"
    TIMING_EXIT = "TimingExit"


@dataclass(frozen=True, order=True)
class ExitParams:
    profit_take: float
    stop_loss: float
    max_hold: int
    trailing_activation: float

    def validate(self) -> None:
        # grid members may pair a trailing activation below the stop
        # loss (the full Cartesian product is evaluated); only
        # positivity is structural
        if min(self.profit_take, self.stop_loss, self.trailing_activation) <= 0 or self.max_hold < 1:
            raise ValueError("exit parameters must be positive")


@dataclass(frozen=True)
class GridSpec:
    pt_levels: tuple[float, ...] = (0.01, 0.015, 0.02, 0.025, 0.03, 0.04, 0.05, 0.06)
    sl_levels: tuple[float, ...] = (0.008, 0.01, 0.012, 0.015, 0.02, 0.025, 0.03)
    mhp_levels: tuple[int, ...] = (3, 5, 7, 9, 12, 15)
    tsa_levels: tuple[float, ...] = (0.015, 0.02, 0.025, 0.03)

    @property
    def size(self) -> int:
        return len(self.pt_levels) * len(self.sl_levels) * len(self.mhp_levels) * len(self.tsa_levels)


@dataclass(frozen=True)
class ObjectiveWeights:
    win_rate: float = 0.25
    return_drawdown: float = 0.35
    turnover_efficiency: float = 0.25
    consistency: float = 0.15

    def validate(self) -> None:
        s = self.win_rate + self.return_drawdown + self.turnover_efficiency + self.consistency
        if abs(s - 1.0) > 1e-9:
            raise ConfigError(f"objective weights must sum to 1, got {s}")


@dataclass(frozen=True)
class EntryRecord:
    instrument_id: str
    date: dt.date
    price: float


@dataclass(frozen=True)
class SimTrade:
    instrument_id: str
    entry_date: dt.date
    exit_date: dt.date
    entry_price: float
    exit_price: float
    holding_days: int
    reason: ExitReason
    flags: tuple[str, ...] = ()

    @property
    def ret(self) -> float:
        return self.exit_price / self.entry_price - 1.0


def enumerate_grid(spec: GridSpec) -> list[ExitParams]:
    """Full Cartesian product in lexicographic (pt, sl, mhp, tsa) order."""
    for name in ("pt_levels", "sl_levels", "mhp_levels", "tsa_levels"):
        if not getattr(spec, name):
            raise ConfigError(f"grid dimension {name} is empty")
    return [
        ExitParams(pt, sl, mhp, tsa)
        for pt, sl, mhp, tsa in itertools.product(
            spec.pt_levels, spec.sl_levels, spec.mhp_levels, spec.tsa_levels
        )
    ]


# -- exit simulation -----------------------------------------------------------


def check_day(
    high: float,
    low: float,
    close: float,
    entry_price: float,
    high_water: float,
    offset: int,
    params: ExitParams,
) -> tuple[float, ExitReason] | None:
    """One day's exit evaluation for a held position.

    `high_water` is the high-water return entering the day (day highs
    up to but excluding today). Returns (fill price, reason) on a
    trigger, else None; callers then update the high-water mark with
    today's high.
    """
    if high_water >= params.trailing_activation and low <= entry_price * (
        1.0 + high_water - params.stop_loss
    ):
        return entry_price * (1.0 + high_water - params.stop_loss), ExitReason.TRAILING_STOP
    if low <= entry_price * (1.0 - params.stop_loss):
        return entry_price * (1.0 - params.stop_loss), ExitReason.STOP_LOSS
    if high >= entry_price * (1.0 + params.profit_take):
        return entry_price * (1.0 + params.profit_take), ExitReason.PROFIT_TAKE
    if offset >= params.max_hold:
        return close, ExitReason.TIME_STOP
    return None


def _walk_single(
    panel: Panel, t0: int, i: int, price: float, params: ExitParams
) -> tuple[int, float, ExitReason, list[str]]:
    """Day-by-day reference walk for one position; returns (offset, price, reason, flags)."""
    T = panel.n_days
    hw = 0.0
    flags: list[str] = []
    for off in range(1, T - t0):
        t = t0 + off
        tradable = panel.present[t, i] and panel.status[t, i] != int(Status.SUSPENDED)
        if not tradable:
            if "held_through_suspension" not in flags:
                flags.append("held_through_suspension")
            continue
        hit = check_day(
            float(panel.high[t, i]),
            float(panel.low[t, i]),
            float(panel.close[t, i]),
            price,
            hw,
            off,
            params,
        )
        if hit is not None:
            return off, hit[0], hit[1], flags
        hw = max(hw, float(panel.high[t, i]) / price - 1.0)
    off = T - 1 - t0
    flags.append("forced_end")
    return off, float(panel.close[T - 1, i]), ExitReason.TIME_STOP, flags


class ExitSimContext:
    """Shared per-entry window arrays reused across many parameter points.

    Building the (entries x offsets) price windows dominates grid
    evaluation cost, and they do not depend on the exit parameters, so
    one context serves the whole grid.
    """

    def __init__(self, entries: list[EntryRecord], panel: Panel, max_offset: int):
        self.entries = entries
        self.panel = panel
        T = panel.n_days
        self.e_t = np.array([panel.date_index(e.date) for e in entries])
        self.e_i = np.array([panel.instrument_index(e.instrument_id) for e in entries])
        self.e_p = np.array([e.price for e in entries], dtype=float)
        if np.any(self.e_p <= 0):
            raise ValueError("entry prices must be positive")
        self.W = min(int(np.max(T - 1 - self.e_t)) if entries else 0, max_offset)
        if self.W <= 0:
            return
        offs = np.arange(1, self.W + 1)
        self.offs = offs
        g = np.minimum(self.e_t[:, None] + offs[None, :], T - 1)
        self.valid = (self.e_t[:, None] + offs[None, :]) <= (T - 1)
        rows = np.broadcast_to(self.e_i[:, None], g.shape)
        self.highs = panel.high[g, rows]
        self.lows = panel.low[g, rows]
        self.closes = panel.close[g, rows]
        self.tradable = (
            (panel.status[g, rows] != int(Status.SUSPENDED)) & panel.present[g, rows] & self.valid
        )
        ret_high = self.highs / self.e_p[:, None] - 1.0
        hw_src = np.where(self.tradable, ret_high, -np.inf)
        self.hw_enter = np.empty_like(ret_high)
        self.hw_enter[:, 0] = 0.0
        if self.W > 1:
            running = np.maximum.accumulate(hw_src[:, :-1], axis=1)
            self.hw_enter[:, 1:] = np.maximum(running, 0.0)
        self.suspended_prefix = np.cumsum(~self.tradable & self.valid, axis=1)
        rank_of = {inst: r for r, inst in enumerate(sorted({e.instrument_id for e in entries}))}
        self.inst_rank = np.array([rank_of[e.instrument_id] for e in entries])
        self.month_of_t = np.array([d.year * 12 + d.month for d in panel.dates])

    def simulate(self, params: ExitParams, grace_days: int = 15) -> list[SimTrade]:
        params.validate()
        panel = self.panel
        entries = self.entries
        if not entries:
            return []
        trades: list[SimTrade] = []
        if self.W <= 0:
            for k, e in enumerate(entries):
                off, price, reason, flags = _walk_single(
                    panel, int(self.e_t[k]), int(self.e_i[k]), float(self.e_p[k]), params
                )
                trades.append(
                    SimTrade(e.instrument_id, e.date, panel.dates[self.e_t[k] + off], float(self.e_p[k]),
                             price, off, reason, tuple(flags))
                )
            return trades

        w = min(self.W, params.max_hold + grace_days)
        sl = slice(0, w)
        hw_enter = self.hw_enter[:, sl]
        lows = self.lows[:, sl]
        highs = self.highs[:, sl]
        tradable = self.tradable[:, sl]
        e_p = self.e_p

        trail_level = e_p[:, None] * (1.0 + hw_enter - params.stop_loss)
        trail_hit = (hw_enter >= params.trailing_activation) & (lows <= trail_level) & tradable
        sl_level = e_p * (1.0 - params.stop_loss)
        pt_level = e_p * (1.0 + params.profit_take)
        sl_hit = (lows <= sl_level[:, None]) & tradable
        pt_hit = (highs >= pt_level[:, None]) & tradable
        time_hit = (self.offs[None, sl] >= params.max_hold) & tradable
        any_hit = trail_hit | sl_hit | pt_hit | time_hit

        has_exit = any_hit.any(axis=1)
        jstar = np.where(has_exit, any_hit.argmax(axis=1), -1)

        for k, e in enumerate(entries):
            if has_exit[k]:
                j = int(jstar[k])
                flags: list[str] = []
                if self.suspended_prefix[k, j] > 0:
                    flags.append("held_through_suspension")
                off = int(j + 1)
                if trail_hit[k, j]:
                    reason, price = ExitReason.TRAILING_STOP, float(trail_level[k, j])
                elif sl_hit[k, j]:
                    reason, price = ExitReason.STOP_LOSS, float(sl_level[k])
                elif pt_hit[k, j]:
                    reason, price = ExitReason.PROFIT_TAKE, float(pt_level[k])
                else:
                    reason, price = ExitReason.TIME_STOP, float(self.closes[k, j])
            else:
                # no trigger inside the window; walk the remaining days directly
                off, price, reason, wflags = _walk_single(
                    panel, int(self.e_t[k]), int(self.e_i[k]), float(self.e_p[k]), params
                )
                flags = wflags
            if off > params.max_hold and "exceeded_max_hold" not in flags:
                flags.append("exceeded_max_hold")
            exit_t = int(self.e_t[k] + off)
            trades.append(
                SimTrade(
                    instrument_id=e.instrument_id,
                    entry_date=e.date,
                    exit_date=panel.dates[exit_t],
                    entry_price=float(self.e_p[k]),
                    exit_price=price,
                    holding_days=off,
                    reason=reason,
                    flags=tuple(flags),
                )
            )
        return trades


    def simulate_arrays(self, params: ExitParams, grace_days: int = 15):
        """(entry_t, exit_t, returns) without building trade objects; grid fast path."""
        panel = self.panel
        if self.W <= 0 or not self.entries:
            trades = self.simulate(params, grace_days)
            return (
                np.array([panel.date_index(tr.entry_date) for tr in trades]),
                np.array([panel.date_index(tr.exit_date) for tr in trades]),
                np.array([tr.ret for tr in trades]),
            )
        w = min(self.W, params.max_hold + grace_days)
        sl = slice(0, w)
        hw_enter = self.hw_enter[:, sl]
        lows = self.lows[:, sl]
        highs = self.highs[:, sl]
        tradable = self.tradable[:, sl]
        e_p = self.e_p

        trail_level = e_p[:, None] * (1.0 + hw_enter - params.stop_loss)
        trail_hit = (hw_enter >= params.trailing_activation) & (lows <= trail_level) & tradable
        sl_hit = (lows <= (e_p * (1.0 - params.stop_loss))[:, None]) & tradable
        pt_hit = (highs >= (e_p * (1.0 + params.profit_take))[:, None]) & tradable
        time_hit = (self.offs[None, sl] >= params.max_hold) & tradable
        any_hit = trail_hit | sl_hit | pt_hit | time_hit
        has_exit = any_hit.any(axis=1)
        jstar = any_hit.argmax(axis=1)

        n = len(self.entries)
        exit_t = np.empty(n, dtype=np.int64)
        price = np.empty(n)
        rows = np.arange(n)
        jj = jstar
        price = np.where(
            trail_hit[rows, jj],
            trail_level[rows, jj],
            np.where(
                sl_hit[rows, jj],
                e_p * (1.0 - params.stop_loss),
                np.where(pt_hit[rows, jj], e_p * (1.0 + params.profit_take), self.closes[rows, jj]),
            ),
        )
        exit_t = self.e_t + jj + 1
        for k in np.flatnonzero(~has_exit):
            off, p_k, _, _ = _walk_single(panel, int(self.e_t[k]), int(self.e_i[k]), float(self.e_p[k]), params)
            exit_t[k] = self.e_t[k] + off
            price[k] = p_k
        return self.e_t.copy(), exit_t, price / e_p - 1.0

    def evaluate(
        self,
        params: ExitParams,
        weights: ObjectiveWeights,
        cost_rate: float = 0.0,
        ratio_cap: float = 10.0,
    ) -> float | None:
        """Objective for one parameter point; equals the SimTrade route exactly."""
        if not self.entries:
            return None
        entry_t, exit_t, rets = self.simulate_arrays(params)
        order = np.lexsort((self.inst_rank, exit_t))
        entry_t = entry_t[order]
        exit_t = exit_t[order]
        rets = rets[order] - cost_rate
        month_keys = self.month_of_t[exit_t]
        return _objective_core(entry_t, exit_t, rets, month_keys, weights, ratio_cap)


def simulate_exits(
    entries: list[EntryRecord],
    panel: Panel,
    params: ExitParams,
    grace_days: int = 15,
) -> list[SimTrade]:
    """Close every entry under the exit rules; vectorized across entries.

    Positions that reach the end of the panel without a trigger are
    closed at the final close and flagged "forced_end".
    """
    if not entries:
        return []
    ctx = ExitSimContext(entries, panel, params.max_hold + grace_days)
    return ctx.simulate(params, grace_days)


# -- objective -----------------------------------------------------------------


def _objective_core(
    entry_idx: np.ndarray,
    exit_idx: np.ndarray,
    rets: np.ndarray,
    month_keys: np.ndarray,
    weights: ObjectiveWeights,
    ratio_cap: float,
) -> float:
    """Objective from trade arrays already sorted by (exit, instrument)."""
    win_rate = float(np.mean(rets > 0))

    equity = np.cumprod(1.0 + rets)
    path = np.concatenate([[1.0], equity])
    peaks = np.maximum.accumulate(path)
    max_dd = float(np.max(1.0 - path / peaks))
    cum_return = float(equity[-1] - 1.0)
    if max_dd <= 0:
        ratio = ratio_cap if cum_return > 0 else 0.0
    else:
        ratio = min(cum_return / max_dd, ratio_cap)

    span = max(1, int(exit_idx.max()) - int(entry_idx.min()) + 1)
    ann_factor = 252.0 / span
    base = 1.0 + cum_return
    ann_return = base**ann_factor - 1.0 if base > 0 else -1.0
    ann_turnover = 2.0 * len(rets) * ann_factor
    turn_eff = ann_return / ann_turnover

    # month keys are non-decreasing in exit order, so groups are contiguous
    starts = np.concatenate([[0], np.flatnonzero(np.diff(month_keys)) + 1])
    month_rets = np.multiply.reduceat(1.0 + rets, starts) - 1.0
    if len(month_rets) < 2:
        consistency = 0.0
    else:
        mu = float(np.mean(month_rets))
        sd = float(np.std(month_rets))
        consistency = -1.0 if mu <= 0 else max(-1.0, 1.0 - sd / mu)

    return (
        weights.win_rate * win_rate
        + weights.return_drawdown * ratio
        + weights.turnover_efficiency * turn_eff
        + weights.consistency * consistency
    )


def evaluate_objective(
    trades: list[SimTrade],
    weights: ObjectiveWeights,
    calendar: tuple[dt.date, ...],
    cost_rate: float = 0.0,
    ratio_cap: float = 10.0,
) -> float | None:
    """Composite objective over a closed-trade ledger.

    Conventions: trades sort by (exit_date, instrument); the equity
    path compounds each trade's net return at full allocation in that
    order; turnover counts two full-notional legs per trade; monthly
    returns group by exit month. Zero trades yields None (objective
    unavailable); zero drawdown caps the return/drawdown ratio; a
    nonpositive mean monthly return floors consistency at -1.
    """
    weights.validate()
    if not trades:
        return None
    ordered = sorted(trades, key=lambda tr: (tr.exit_date, tr.instrument_id))
    rets = np.array([tr.ret - cost_rate for tr in ordered])
    didx = {d: i for i, d in enumerate(calendar)}
    entry_idx = np.array([didx[tr.entry_date] for tr in ordered])
    exit_idx = np.array([didx[tr.exit_date] for tr in ordered])
    month_keys = np.array([tr.exit_date.year * 12 + tr.exit_date.month for tr in ordered])
    return _objective_core(entry_idx, exit_idx, rets, month_keys, weights, ratio_cap)


# -- 3-state Gaussian HMM ---------------------------------------------------------


@dataclass
class RegimeModel:
    """3 hidden volatility states with Gaussian emissions, means ascending."""

    initial: np.ndarray
    transition: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    flags: tuple[str, ...] = ()

    STATE_NAMES = ("LowVol", "NormalVol", "HighVol")

    def validate(self) -> None:
        if self.transition.shape != (3, 3) or self.initial.shape != (3,):
            raise ValueError("regime model must have 3 states")
        if np.any(np.abs(self.transition.sum(axis=1) - 1.0) > 1e-12):
            raise ValueError("transition rows must sum to 1")
        if np.any(self.stds <= 0):
            raise ValueError("emission stds must be positive")
        if not (self.means[0] <= self.means[1] <= self.means[2]):
            raise ValueError("state means must ascend")

    def log_emission(self, obs: np.ndarray) -> np.ndarray:
        obs = np.asarray(obs, dtype=float)
        out = np.empty((len(obs), 3))
        for k in range(3):
            out[:, k] = (
                -0.5 * math.log(2.0 * math.pi)
                - math.log(self.stds[k])
                - 0.5 * ((obs - self.means[k]) / self.stds[k]) ** 2
            )
        return out


def fit_regime_hmm(
    observations: np.ndarray,
    seed: int = 0,
    max_iter: int = 500,
    tol: float = 1e-6,
    std_floor: float = 1e-6,
) -> tuple[RegimeModel, list[float]]:
    """Baum-Welch to a local optimum; states relabeled by ascending mean.

    Returns the model and the per-iteration log-likelihood trace, which
    is non-decreasing. Degenerate emissions are floored and flagged.
    """
    obs = np.asarray(observations, dtype=float)
    n = len(obs)
    if n < 100:
        raise FitError(f"HMM fit requires >= 100 observations, got {n}")
    rng = substream(seed, "hmm-init")
    spread = float(np.std(obs))
    flags: list[str] = []
    if spread <= 0:
        flags.append("degenerate_observations")
        spread = max(abs(float(np.mean(obs))), 1.0) * 1e-3
    means = np.quantile(obs, [0.2, 0.5, 0.8]) + 1e-3 * spread * rng.standard_normal(3)
    means = np.sort(means)
    stds = np.full(3, max(spread, std_floor))
    trans = np.full((3, 3), 0.05)
    np.fill_diagonal(trans, 0.90)
    init = np.full(3, 1.0 / 3.0)

    ll_trace: list[float] = []
    for _ in range(max_iter):
        logb = RegimeModel(init, trans, means, stds).log_emission(obs)
        b = np.exp(logb - logb.max(axis=1, keepdims=True))
        bmax = logb.max(axis=1)

        # scaled forward-backward
        alpha = np.empty((n, 3))
        c = np.empty(n)
        alpha[0] = init * b[0]
        c[0] = alpha[0].sum()
        alpha[0] /= c[0]
        for t in range(1, n):
            alpha[t] = (alpha[t - 1] @ trans) * b[t]
            c[t] = alpha[t].sum()
            alpha[t] /= c[t]
        beta = np.empty((n, 3))
        beta[-1] = 1.0
        for t in range(n - 2, -1, -1):
            beta[t] = (trans @ (b[t + 1] * beta[t + 1])) / c[t + 1]
        ll = float(np.sum(np.log(c)) + np.sum(bmax))
        ll_trace.append(ll)

        gamma = alpha * beta
        gamma /= gamma.sum(axis=1, keepdims=True)
        xi_num = np.zeros((3, 3))
        for t in range(n - 1):
            xi_num += np.outer(alpha[t], b[t + 1] * beta[t + 1] / c[t + 1]) * trans
        trans = xi_num / np.maximum(gamma[:-1].sum(axis=0)[:, None], 1e-300)
        trans /= trans.sum(axis=1, keepdims=True)
        init = gamma[0] / gamma[0].sum()
        nk = gamma.sum(axis=0)
        means = (gamma * obs[:, None]).sum(axis=0) / np.maximum(nk, 1e-300)
        var = (gamma * (obs[:, None] - means) ** 2).sum(axis=0) / np.maximum(nk, 1e-300)
        stds = np.sqrt(np.maximum(var, 0.0))
        if np.any(stds < std_floor):
            stds = np.maximum(stds, std_floor)
            if "emission_floored" not in flags:
                flags.append("emission_floored")
        if len(ll_trace) >= 2 and abs(ll_trace[-1] - ll_trace[-2]) < tol:
            break

    order = np.argsort(means, kind="stable")
    model = RegimeModel(
        initial=init[order],
        transition=trans[np.ix_(order, order)],
        means=means[order],
        stds=stds[order],
        flags=tuple(flags),
    )
    model.validate()
    return model, ll_trace


def viterbi_regime(model: RegimeModel, observations: np.ndarray) -> np.ndarray:
    """Most probable state path in log domain with backpointers."""
    obs = np.asarray(observations, dtype=float)
    if len(obs) == 0:
        raise ValueError("observations must be non-empty")
    logb = model.log_emission(obs)
    log_init = np.log(np.maximum(model.initial, 1e-300))
    log_trans = np.log(np.maximum(model.transition, 1e-300))
    n = len(obs)
    delta = log_init + logb[0]
    back = np.zeros((n, 3), dtype=np.int64)
    for t in range(1, n):
        cand = delta[:, None] + log_trans
        back[t] = cand.argmax(axis=0)
        delta = cand.max(axis=0) + logb[t]
    path = np.empty(n, dtype=np.int64)
    path[-1] = int(delta.argmax())
    for t in range(n - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path


class ViterbiDecoder:
    """Incremental Viterbi end-state: the state at t of the optimal path over obs[0..t]."""

    def __init__(self, model: RegimeModel):
        self.model = model
        self.log_trans = np.log(np.maximum(model.transition, 1e-300))
        self.delta: np.ndarray | None = None

    def step(self, obs_value: float) -> int:
        logb = self.model.log_emission(np.array([obs_value]))[0]
        if self.delta is None:
            self.delta = np.log(np.maximum(self.model.initial, 1e-300)) + logb
        else:
            self.delta = (self.delta[:, None] + self.log_trans).max(axis=0) + logb
        return int(self.delta.argmax())


# -- per-regime optimization ------------------------------------------------------


def evaluate_grid(
    entries: list[EntryRecord],
    panel: Panel,
    grid: list[ExitParams],
    weights: ObjectiveWeights,
    cost_rate: float = 0.0,
) -> list[tuple[ExitParams, float | None]]:
    """Objective for every grid point, in the grid's own order.

    One entry set serves every point: exits differ, entries do not.
    """
    weights.validate()
    if not entries:
        return [(params, None) for params in grid]
    ctx = ExitSimContext(entries, panel, max(p.max_hold for p in grid) + 15)
    return [(params, ctx.evaluate(params, weights, cost_rate)) for params in grid]


def argmax_objective(results: list[tuple[ExitParams, float | None]]) -> tuple[ExitParams, float]:
    """First strict maximum in order: lexicographically smallest params win ties."""
    best: tuple[ExitParams, float] | None = None
    for params, obj in results:
        if obj is None:
            continue
        if best is None or obj > best[1]:
            best = (params, obj)
    if best is None:
        raise FitError("no grid point produced an evaluable objective")
    return best


def optimize_per_regime(
    panel: Panel,
    entries: list[EntryRecord],
    spec: GridSpec,
    weights: ObjectiveWeights,
    regime_of_date: dict[dt.date, int],
    min_regime_days: int = 30,
    cost_rate: float = 0.0,
) -> tuple[dict[int, ExitParams], dict[int, tuple[str, ...]], list[tuple[ExitParams, float | None]]]:
    """Grid argmax per regime, with the global optimum as sparse-regime fallback.

    Returns (params per regime, flags per regime, the global objective table).
    """
    grid = enumerate_grid(spec)
    global_results = evaluate_grid(entries, panel, grid, weights, cost_rate)
    global_best, _ = argmax_objective(global_results)
    day_counts: dict[int, int] = {}
    for r in regime_of_date.values():
        day_counts[r] = day_counts.get(r, 0) + 1
    out: dict[int, ExitParams] = {}
    flags: dict[int, tuple[str, ...]] = {}
    for r in range(3):
        sub = [e for e in entries if regime_of_date.get(e.date) == r]
        if day_counts.get(r, 0) < min_regime_days or not sub:
            out[r] = global_best
            flags[r] = ("global_fallback",)
            continue
        results = evaluate_grid(sub, panel, grid, weights, cost_rate)
        try:
            best, _ = argmax_objective(results)
            out[r] = best
            flags[r] = ()
        except FitError:
            out[r] = global_best
            flags[r] = ("global_fallback",)
    return out, flags, global_results


def smooth_params(regime_params: ExitParams, previous: ExitParams) -> ExitParams:
    """Blend 0.7*regime + 0.3*previous per field; max_hold rounds to >= 1."""
    regime_params.validate()
    previous.validate()

    def mix(a: float, b: float) -> float:
        # b + 0.7*(a-b) == 0.7a + 0.3b but is an exact fixed point at a == b
        return b + 0.7 * (a - b)

    mh = mix(regime_params.max_hold, previous.max_hold)
    return ExitParams(
        profit_take=mix(regime_params.profit_take, previous.profit_take),
        stop_loss=mix(regime_params.stop_loss, previous.stop_loss),
        max_hold=max(1, int(math.floor(mh + 0.5))),
        trailing_activation=mix(regime_params.trailing_activation, previous.trailing_activation),
    )
