"""Market timing: multi-scale features, regime-aware boosted trees, and
the exposure filter.

The timing model is a stagewise least-squares gradient boosting
ensemble of depth-limited regression trees fit separately per
volatility regime (sparse regimes share the global model). Its
prediction feeds the momentum component of a three-part timing signal
whose value maps linearly onto a [0, 1] exposure multiplier applied to
new entries.

Long-horizon macro, valuation, and cross-market inputs have no source
in a bare price panel; the corresponding features are price-derived
proxies and are flagged as such.
"""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import dataclass, field

import numpy as np

from .marketdata import Panel

TIMING_FEATURES = (
    "mkt_ret_1",
    "mkt_ret_5",
    "rev_1",
    "vw_ret_5",
    "dispersion_1",
    "dispersion_20",
    "vol_regime_ratio",
    "momentum_spread_20",
    "trend_60",
    "valuation_spread_60",
    "corr_proxy_60",
)

PROXY_FEATURES = ("trend_60", "valuation_spread_60", "corr_proxy_60")


@dataclass(frozen=True)
class MultiScaleFeatures:
    date: dt.date
    values: dict[str, float]
    proxy_flags: tuple[str, ...] = PROXY_FEATURES

    def as_array(self) -> np.ndarray:
        return np.array([self.values[name] for name in TIMING_FEATURES])


@dataclass(frozen=True)
class TimingSignal:
    date: dt.date
    momentum_component: float
    volatility_component: float
    sentiment_component: float
    betas: tuple[float, float, float]
    value: float
    exposure_multiplier: float
    flags: tuple[str, ...] = ()


def build_multiscale_features(panel: Panel, date: dt.date) -> MultiScaleFeatures | None:
    """Market-level feature vector from bars dated <= date; None if < 60 days."""
    t = panel.date_index(date)
    if t < 60:
        return None
    eligible = np.flatnonzero(panel.first_present <= t - 60)
    if eligible.size < 2:
        return None
    closes = panel.close[t - 60 : t + 1][:, eligible]
    tovs = panel.turnover[t - 60 : t + 1][:, eligible]
    caps = panel.market_cap[t][eligible]
    rets = closes[1:] / closes[:-1] - 1.0  # (60, M)
    mkt = rets.mean(axis=1)

    ret_1 = float(mkt[-1])
    ret5_by_inst = closes[-1] / closes[-6] - 1.0
    ret_5 = float(np.mean(ret5_by_inst))
    w = tovs[-1]
    vw_ret_5 = float(np.sum(w * ret5_by_inst) / w.sum()) if w.sum() > 0 else ret_5

    disp = rets.std(axis=1)  # per-day cross-sectional dispersion
    dispersion_1 = float(disp[-1])
    dispersion_20 = float(np.mean(disp[-20:]))
    vol_5 = float(np.std(mkt[-5:]))
    vol_20 = float(np.std(mkt[-20:]))
    vol_regime_ratio = vol_5 / vol_20 - 1.0 if vol_20 > 0 else 0.0

    mom20 = closes[-1] / closes[-21] - 1.0
    order = np.argsort(mom20)
    q = max(1, len(order) // 5)
    momentum_spread_20 = float(np.mean(mom20[order[-q:]]) - np.mean(mom20[order[:q]]))

    log_index = np.log(closes).mean(axis=1)
    xs = np.arange(len(log_index), dtype=float)
    trend_60 = float(np.polyfit(xs, log_index, 1)[0])
    valuation_spread_60 = float(np.std(np.log(caps)))
    inst_var = rets.var(axis=0)
    mean_var = float(np.mean(inst_var))
    corr_proxy_60 = float(np.var(mkt) / mean_var) if mean_var > 0 else 0.0

    values = {
        "mkt_ret_1": ret_1,
        "mkt_ret_5": ret_5,
        "rev_1": -ret_1,
        "vw_ret_5": vw_ret_5,
        "dispersion_1": dispersion_1,
        "dispersion_20": dispersion_20,
        "vol_regime_ratio": vol_regime_ratio,
        "momentum_spread_20": momentum_spread_20,
        "trend_60": trend_60,
        "valuation_spread_60": valuation_spread_60,
        "corr_proxy_60": corr_proxy_60,
    }
    return MultiScaleFeatures(date=date, values=values)


# -- regression trees and boosting ---------------------------------------------


def _fit_tree(X: np.ndarray, y: np.ndarray, depth: int, min_leaf: int = 2) -> dict:
    """Exact greedy least-squares tree; deterministic under sample permutation.

    Ties resolve to the lowest feature index and the smallest split
    position, so refitting permuted samples yields identical trees.
    """
    n = len(y)
    leaf = {"value": float(np.mean(y))}
    if depth == 0 or n < 2 * min_leaf:
        return leaf
    base_sse = float(np.sum((y - np.mean(y)) ** 2))
    ks = np.arange(min_leaf, n - min_leaf + 1)
    best = None  # (gain, feature, threshold)
    for f in range(X.shape[1]):
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        ys = y[order]
        csum = np.cumsum(ys)
        csq = np.cumsum(ys**2)
        ls, lq = csum[ks - 1], csq[ks - 1]
        rs, rq = csum[-1] - ls, csq[-1] - lq
        sse = (lq - ls**2 / ks) + (rq - rs**2 / (n - ks))
        sse = np.where(xs[ks - 1] != xs[ks], sse, np.inf)  # no split between equal values
        j = int(np.argmin(sse))
        if not np.isfinite(sse[j]):
            continue
        gain = base_sse - float(sse[j])
        if gain > 1e-12 and (best is None or gain > best[0] + 1e-12):
            k = int(ks[j])
            best = (gain, f, float(0.5 * (xs[k - 1] + xs[k])))
    if best is None:
        return leaf
    _, f, thr = best
    mask = X[:, f] <= thr
    return {
        "feature": f,
        "threshold": thr,
        "left": _fit_tree(X[mask], y[mask], depth - 1, min_leaf),
        "right": _fit_tree(X[~mask], y[~mask], depth - 1, min_leaf),
    }


def _tree_predict(tree: dict, X: np.ndarray) -> np.ndarray:
    if "value" in tree:
        return np.full(len(X), tree["value"])
    mask = X[:, tree["feature"]] <= tree["threshold"]
    out = np.empty(len(X))
    out[mask] = _tree_predict(tree["left"], X[mask])
    out[~mask] = _tree_predict(tree["right"], X[~mask])
    return out


@dataclass
class BoostedEnsemble:
    """Per-regime boosted tree models with a global fallback."""

    shrinkage: float = 0.1
    models: dict[str, dict] = field(default_factory=dict)  # key: "global" or "regime:<r>"
    loss_traces: dict[str, list[float]] = field(default_factory=dict)
    flags: tuple[str, ...] = ()

    def predict(self, x: np.ndarray, regime: int) -> float:
        key = f"regime:{regime}"
        model = self.models.get(key) or self.models["global"]
        x2 = np.asarray(x, dtype=float).reshape(1, -1)
        val = model["base"]
        for tree in model["trees"]:
            val += self.shrinkage * float(_tree_predict(tree, x2)[0])
        return float(val)

    def has_regime(self, regime: int) -> bool:
        return f"regime:{regime}" in self.models

    def to_json(self) -> str:
        return json.dumps(
            {"shrinkage": self.shrinkage, "models": self.models, "flags": list(self.flags)},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, s: str) -> "BoostedEnsemble":
        d = json.loads(s)
        return cls(shrinkage=d["shrinkage"], models=d["models"], flags=tuple(d["flags"]))


def _is_constant(y: np.ndarray) -> bool:
    return float(np.std(y)) <= 1e-12 * max(1.0, abs(float(np.mean(y))))


def _boost(X: np.ndarray, y: np.ndarray, n_trees: int, depth: int, shrinkage: float) -> tuple[dict, list[float]]:
    base = float(np.mean(y))
    pred = np.full(len(y), base)
    trees: list[dict] = []
    trace = [float(np.mean((y - pred) ** 2))]
    if _is_constant(y):
        return {"base": base, "trees": []}, trace
    for _ in range(n_trees):
        resid = y - pred
        tree = _fit_tree(X, resid, depth)
        trees.append(tree)
        pred = pred + shrinkage * _tree_predict(tree, X)
        trace.append(float(np.mean((y - pred) ** 2)))
    return {"base": base, "trees": trees}, trace


def fit_timing_model(
    features: np.ndarray,
    labels: np.ndarray,
    regimes: np.ndarray,
    n_trees: int = 50,
    depth: int = 3,
    shrinkage: float = 0.1,
    min_regime_samples: int = 50,
) -> BoostedEnsemble:
    """Stagewise boosting per regime; sparse regimes share the global model.

    The in-sample MSE trace is non-increasing because each leaf holds
    the mean residual of its samples.
    """
    X = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=float)
    regimes = np.asarray(regimes)
    flags: list[str] = []
    ens = BoostedEnsemble(shrinkage=shrinkage)
    if _is_constant(y):
        flags.append("constant_labels")
    model, trace = _boost(X, y, n_trees, depth, shrinkage)
    ens.models["global"] = model
    ens.loss_traces["global"] = trace
    for r in sorted(set(int(v) for v in regimes)):
        rows = regimes == r
        if int(rows.sum()) < min_regime_samples:
            flags.append(f"regime_{r}_shares_global")
            continue
        model_r, trace_r = _boost(X[rows], y[rows], n_trees, depth, shrinkage)
        ens.models[f"regime:{r}"] = model_r
        ens.loss_traces[f"regime:{r}"] = trace_r
    ens.flags = tuple(flags)
    return ens


# -- signal and filter -------------------------------------------------------------


def timing_signal(
    ensemble: BoostedEnsemble,
    features: MultiScaleFeatures,
    regime: int,
    betas: tuple[float, float, float],
    vol_component: float,
    sentiment_component: float = 0.0,
) -> TimingSignal:
    """Combine momentum/volatility/sentiment components into an exposure multiplier.

    value = b1*momentum + b2*volatility + b3*sentiment; the multiplier
    is clamp(0.5 + value, 0, 1).
    """
    flags: tuple[str, ...] = ()
    if not ensemble.has_regime(regime):
        flags = ("regime_model_fallback",)
    momentum = ensemble.predict(features.as_array(), regime)
    b1, b2, b3 = betas
    value = b1 * momentum + b2 * vol_component + b3 * sentiment_component
    multiplier = min(max(0.5 + value, 0.0), 1.0)
    return TimingSignal(
        date=features.date,
        momentum_component=momentum,
        volatility_component=vol_component,
        sentiment_component=sentiment_component,
        betas=tuple(float(b) for b in betas),
        value=value,
        exposure_multiplier=multiplier,
        flags=flags,
    )


def apply_timing_filter(weights, signal: TimingSignal):
    """Scale every target weight by the exposure multiplier.

    A zero multiplier empties new entries; held positions are the exit
    logic's concern, not the filter's. Relative proportions are
    preserved exactly.
    """
    m = signal.exposure_multiplier
    if not 0.0 <= m <= 1.0:
        raise ValueError("exposure multiplier must lie in [0, 1]")
    return weights.scaled(m)
