"""Opening-signal construction, mixture-model gating, and entry decisions.

The opening signal is a weighted combination of overnight gap, volume
ratio, conditional volatility, and a pluggable sentiment input. Each
date's cross-section of signals is fitted with a 3-component Gaussian
mixture whose EM is regularized toward balanced component weights; the
entry gate combines the mixture tail probability at a vol-adaptive
threshold with a cross-sectional score floor.

Daily bars carry no pre-market volume, so the volume-ratio numerator is
proxied by the date's full-session volume.
"""

from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import FitError
from .marketdata import Panel, Status
from .seeds import substream

SentimentProvider = Callable[[str, dt.date], float]


def zero_sentiment(instrument_id: str, date: dt.date) -> float:
    """Default sentiment provider: constant zero."""
    return 0.0


def normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


@dataclass(frozen=True)
class OpeningSignal:
    instrument_id: str
    gap: float
    volume_ratio: float
    vol: float
    sentiment: float
    weights: tuple[float, float, float, float]
    value: float

    @property
    def components(self) -> tuple[float, float, float, float]:
        return (self.gap, self.volume_ratio, self.vol, self.sentiment)


@dataclass(frozen=True)
class GmmParams:
    """3-component univariate Gaussian mixture, components ordered by mean."""

    weights: tuple[float, float, float]
    means: tuple[float, float, float]
    stds: tuple[float, float, float]
    lam: float = 0.0
    flags: tuple[str, ...] = ()

    def validate(self, pi_floor: float = 1e-6) -> None:
        if abs(sum(self.weights) - 1.0) > 1e-12:
            raise ValueError("mixture weights must sum to 1")
        if any(w < pi_floor - 1e-15 for w in self.weights):
            raise ValueError(f"mixture weights must be >= {pi_floor}")
        if any(s <= 0 for s in self.stds):
            raise ValueError("mixture stds must be positive")

    def log_density(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        comps = np.empty((len(x), 3))
        for k in range(3):
            comps[:, k] = (
                math.log(self.weights[k])
                - 0.5 * math.log(2.0 * math.pi)
                - math.log(self.stds[k])
                - 0.5 * ((x - self.means[k]) / self.stds[k]) ** 2
            )
        m = comps.max(axis=1, keepdims=True)
        return (m + np.log(np.sum(np.exp(comps - m), axis=1, keepdims=True)))[:, 0]

    def tail_probability(self, threshold: float) -> float:
        """P(S > threshold) under the mixture."""
        return float(
            sum(
                w * (1.0 - normal_cdf((threshold - m) / s))
                for w, m, s in zip(self.weights, self.means, self.stds)
            )
        )

    def to_dict(self) -> dict:
        return {
            "weights": list(self.weights),
            "means": list(self.means),
            "stds": list(self.stds),
            "lambda": self.lam,
            "flags": list(self.flags),
        }

    def to_json(self) -> str:
        import json

        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass(frozen=True)
class EntryThresholds:
    theta0: float
    beta: float
    theta_t: float
    phi_t: float
    psi: float

    @classmethod
    def for_date(
        cls, theta0: float, beta: float, recent_vol: float, phi_t: float, psi: float
    ) -> "EntryThresholds":
        return cls(
            theta0=theta0,
            beta=beta,
            theta_t=adapt_threshold(theta0, beta, recent_vol),
            phi_t=phi_t,
            psi=psi,
        )


# -- signal construction ---------------------------------------------------


def compute_opening_signal(
    panel: Panel,
    date: dt.date,
    instrument_id: str,
    weights: tuple[float, float, float, float],
    vol: float,
    sentiment_source: SentimentProvider | None = None,
) -> OpeningSignal | None:
    """Opening signal at the date's open, or None when unavailable.

    gap = (open_t - close_{t-1}) / close_{t-1}; volume ratio divides
    the date's volume by the mean of the prior 20 days; `vol` is the
    caller-supplied conditional volatility estimate.
    """
    t = panel.date_index(date)
    i = panel.instrument_index(instrument_id)
    if not panel.present[t, i] or panel.status[t, i] == int(Status.SUSPENDED):
        return None
    if t - panel.first_present[i] < 21:
        return None
    prev_close = float(panel.close[t - 1, i])
    if prev_close <= 0:
        return None
    gap = float(panel.open[t, i]) / prev_close - 1.0
    mean_vol = float(np.mean(panel.volume[t - 20 : t, i]))
    if mean_vol <= 0:
        return None
    vr = float(panel.volume[t, i]) / mean_vol
    provider = sentiment_source or zero_sentiment
    sent = float(provider(instrument_id, date))
    a1, a2, a3, a4 = weights
    value = a1 * gap + a2 * vr + a3 * vol + a4 * sent
    return OpeningSignal(
        instrument_id=instrument_id,
        gap=gap,
        volume_ratio=vr,
        vol=vol,
        sentiment=sent,
        weights=tuple(float(w) for w in weights),
        value=value,
    )


def estimate_signal_weights(
    components: np.ndarray,
    next_returns: np.ndarray,
    ages: np.ndarray,
    decay: float = 0.99,
) -> tuple[np.ndarray, tuple[str, ...]]:
    """Exponentially decayed least squares of returns on the 4 components.

    Sample weights are decay**age. A singular normal system falls back
    to ridge with penalty 1e-6 and the result is flagged.
    """
    X = np.asarray(components, dtype=float)
    y = np.asarray(next_returns, dtype=float)
    ages = np.asarray(ages, dtype=float)
    if X.ndim != 2 or X.shape[1] != 4:
        raise ValueError("components must be (n, 4)")
    if len(X) < 30:
        raise FitError(f"signal weight estimation requires >= 30 observations, got {len(X)}")
    if not 0 < decay <= 1:
        raise ValueError("decay must be in (0, 1]")
    w = decay**ages
    xtwx = X.T @ (X * w[:, None])
    xtwy = X.T @ (y * w)
    flags: tuple[str, ...] = ()
    use_ridge = not np.all(np.isfinite(xtwx)) or np.linalg.cond(xtwx) > 1e12
    if not use_ridge:
        try:
            alpha = np.linalg.solve(xtwx, xtwy)
        except np.linalg.LinAlgError:
            use_ridge = True
    if use_ridge:
        alpha = np.linalg.solve(xtwx + 1e-6 * np.eye(4), xtwy)
        flags = ("ridge_fallback",)
    return alpha, flags


# -- regularized mixture EM --------------------------------------------------


def _penalized_pi_step(nk: np.ndarray, lam: float, floor: float) -> np.ndarray:
    """Exact maximizer of sum(nk*log pi) - lam*sum|pi - 1/3| on the floored simplex.

    Solved by bisection on the budget multiplier: for a trial nu, each
    component takes nk/(nu+lam) when that exceeds 1/3, nk/(nu-lam) when
    that is below 1/3 (only for nu > lam), else sits at 1/3; values are
    clipped at the floor. The per-component value is non-increasing in
    nu, so the simplex constraint bisects cleanly.
    """
    total = float(np.sum(nk))
    if lam == 0.0:
        pi = np.maximum(nk / total, floor)
        return pi / pi.sum()

    n0, n1, n2 = float(nk[0]), float(nk[1]), float(nk[2])
    third = 1.0 / 3.0

    def pi_of(nu: float) -> tuple[float, float, float]:
        out = []
        for nkk in (n0, n1, n2):
            a = nkk / (nu + lam) if nu + lam > 0 else math.inf
            if a > third:
                val = a
            elif nu > lam and nkk / (nu - lam) < third:
                val = nkk / (nu - lam)
            else:
                val = third
            out.append(val if val > floor else floor)
        return out[0], out[1], out[2]

    lo = -lam + 1e-12 * max(1.0, total)
    hi = lam + 3.0 * total + 1.0
    for _ in range(120):
        mid = 0.5 * (lo + hi)
        if sum(pi_of(mid)) > 1.0:
            lo = mid
        else:
            hi = mid
    pi = np.array(pi_of(0.5 * (lo + hi)))
    return pi / pi.sum()


def _penalized_objective(x: np.ndarray, params: GmmParams, lam: float) -> float:
    nll = -float(np.sum(params.log_density(x)))
    pen = lam * sum(abs(w - 1.0 / 3.0) for w in params.weights)
    return nll + pen


def default_gmm_init(signals: np.ndarray, seed: int) -> GmmParams:
    """Deterministic tercile init with a small seeded jitter on the means."""
    x = np.sort(np.asarray(signals, dtype=float))
    n = len(x)
    terciles = [x[: n // 3], x[n // 3 : 2 * n // 3], x[2 * n // 3 :]]
    means = [float(np.mean(t)) for t in terciles]
    spread = float(np.std(x)) or 1.0
    rng = substream(seed, "gmm-init")
    means = [m + 1e-3 * spread * rng.standard_normal() for m in means]
    return GmmParams(
        weights=(1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0),
        means=tuple(sorted(means)),
        stds=(spread, spread, spread),
    )


def fit_gmm_em(
    signals: np.ndarray,
    lam: float = 0.0,
    seed: int = 0,
    max_iter: int = 200,
    tol: float = 1e-10,
    sigma_floor: float | None = None,
    pi_floor: float = 1e-6,
    init: GmmParams | None = None,
) -> tuple[GmmParams, list[float]]:
    """Penalized EM for the 3-component mixture.

    Minimizes -sum(log p(s)) + lam*sum|pi_k - 1/3|. Every M-step is an
    exact constrained maximizer, so the returned per-iteration
    penalized-objective trace (starting at the init) is non-increasing
    up to float noise. Variance collapse floors the component stdev and
    continues, flagged.
    """
    x = np.asarray(signals, dtype=float)
    if len(x) < 10:
        raise FitError(f"mixture fit requires >= 10 samples, got {len(x)}")
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if sigma_floor is None:
        sigma_floor = max(1e-8, 1e-4 * float(np.std(x)))
    params = init or default_gmm_init(x, seed)
    flags: list[str] = list(params.flags)
    trace = [_penalized_objective(x, params, lam)]

    for _ in range(max_iter):
        # E-step: responsibilities in log space
        logc = np.empty((len(x), 3))
        for k in range(3):
            logc[:, k] = (
                math.log(params.weights[k])
                - 0.5 * math.log(2.0 * math.pi)
                - math.log(params.stds[k])
                - 0.5 * ((x - params.means[k]) / params.stds[k]) ** 2
            )
        m = logc.max(axis=1, keepdims=True)
        gamma = np.exp(logc - m)
        gamma /= gamma.sum(axis=1, keepdims=True)

        nk = gamma.sum(axis=0)
        means = list(params.means)
        stds = list(params.stds)
        for k in range(3):
            if nk[k] <= 1e-12:
                flags.append("empty_component")
                continue
            mu = float(np.sum(gamma[:, k] * x) / nk[k])
            var = float(np.sum(gamma[:, k] * (x - mu) ** 2) / nk[k])
            sd = math.sqrt(var) if var > 0 else 0.0
            if sd < sigma_floor:
                sd = sigma_floor
                if "variance_floored" not in flags:
                    flags.append("variance_floored")
            means[k] = mu
            stds[k] = sd
        pi = _penalized_pi_step(nk, lam, pi_floor)
        params = GmmParams(
            weights=tuple(float(p) for p in pi),
            means=tuple(means),
            stds=tuple(stds),
            lam=lam,
            flags=tuple(flags),
        )
        trace.append(_penalized_objective(x, params, lam))
        if abs(trace[-2] - trace[-1]) < tol:
            break

    order = np.argsort(params.means)
    params = GmmParams(
        weights=tuple(params.weights[k] for k in order),
        means=tuple(params.means[k] for k in order),
        stds=tuple(params.stds[k] for k in order),
        lam=lam,
        flags=tuple(flags),
    )
    params.validate(pi_floor)
    return params, trace


# -- thresholds and entry rule ------------------------------------------------


def adapt_threshold(theta0: float, beta: float, recent_vol: float) -> float:
    """theta_t = theta0 + beta * trailing realized volatility."""
    if recent_vol < 0:
        raise ValueError("recent_vol must be >= 0")
    return theta0 + beta * recent_vol


def entry_decision(
    signal: OpeningSignal | None,
    gmm: GmmParams,
    thresholds: EntryThresholds,
    cs_score: float,
) -> bool:
    """True iff the mixture tail at theta_t clears phi_t and the score clears psi.

    The mixture is fitted on the date's pooled cross-section of
    signals; its tail probability is a date-level gate, while the score
    floor differentiates instruments. An unavailable signal never
    enters.
    """
    if signal is None:
        return False
    if not cs_score > thresholds.psi:
        return False
    return gmm.tail_probability(thresholds.theta_t) > thresholds.phi_t
