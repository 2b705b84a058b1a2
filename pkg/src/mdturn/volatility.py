"""Hierarchical volatility stack.

Three per-instrument variance estimators run causally over a return
series: a GARCH(1,1) quasi-likelihood fit, trailing realized variance,
and a bootstrap particle filter on a log-variance AR(1) model. A
Kalman filter with a random-walk state regresses next-day squared
returns on the three forecasts; the posterior weight vector is
projected onto the simplex after every update so the combined estimate
is a convex combination and provably nonnegative.
"""

from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.signal import lfilter

from .errors import DataError, FitError
from .seeds import substream

MAX_PERSISTENCE = 0.999


@dataclass(frozen=True)
class GarchParams:
    omega: float
    alpha: float
    beta: float

    def validate(self) -> None:
        if not self.omega > 0:
            raise ValueError("omega must be > 0")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if self.alpha + self.beta >= 1.0:
            raise ValueError("alpha + beta must be < 1 (covariance stationarity)")

    @property
    def persistence(self) -> float:
        return self.alpha + self.beta


@dataclass(frozen=True)
class VolEstimate:
    date: dt.date
    sigma2_garch: float
    sigma2_rv: float
    sigma2_sv: float
    weights: tuple[float, float, float]
    sigma2_combined: float


@dataclass(frozen=True)
class StressIndex:
    date: dt.date
    level: float
    zscore: float
    flags: tuple[str, ...] = ()


# -- GARCH(1,1) -----------------------------------------------------------


def garch_variance_path(residuals: np.ndarray, params: GarchParams, sigma2_0: float | None = None) -> np.ndarray:
    """Conditional variance recursion sigma2_t = omega + alpha*r2_{t-1} + beta*sigma2_{t-1}."""
    r2 = residuals**2
    if sigma2_0 is None:
        sigma2_0 = float(np.mean(r2)) if len(r2) else params.omega
    # linear recursion solved with an IIR filter: sigma2 - beta*sigma2_prev = omega + alpha*r2_prev
    drive = params.omega + params.alpha * r2[:-1]
    zi = [params.beta * sigma2_0]
    tail, _ = lfilter([1.0], [1.0, -params.beta], drive, zi=zi)
    return np.concatenate([[sigma2_0], tail])


def _garch_nll(x: np.ndarray, residuals: np.ndarray, var: float) -> float:
    omega, alpha, beta = x
    if omega <= 0 or alpha < 0 or beta < 0:
        return 1e12
    pen = 0.0
    if alpha + beta > MAX_PERSISTENCE:
        pen = 1e6 * (alpha + beta - MAX_PERSISTENCE) ** 2
        scale = MAX_PERSISTENCE / (alpha + beta)
        alpha, beta = alpha * scale, beta * scale
    sig2 = garch_variance_path(residuals, GarchParams(omega, alpha, beta), sigma2_0=var)
    sig2 = np.maximum(sig2, 1e-18)
    nll = 0.5 * float(np.sum(np.log(sig2) + residuals**2 / sig2))
    return nll + pen


def fit_garch(returns: np.ndarray) -> tuple[GarchParams, np.ndarray, tuple[str, ...]]:
    """Fit GARCH(1,1) by Gaussian quasi-maximum likelihood.

    Returns (params, in-sample variance path, flags). Falls back to
    (0.05*var, 0.05, 0.90) when the data are degenerate or the
    optimizer fails, flagged "fallback".
    """
    returns = np.asarray(returns, dtype=float)
    if len(returns) < 100:
        raise FitError(f"GARCH fit requires >= 100 observations, got {len(returns)}")
    if not np.all(np.isfinite(returns)):
        raise DataError("GARCH fit requires finite returns")
    resid = returns - np.mean(returns)
    var = float(np.var(resid))
    flags: list[str] = []
    if var <= 0:
        params = GarchParams(omega=1e-10, alpha=0.05, beta=0.90)
        flags.append("fallback")
        flags.append("degenerate_variance")
        return params, np.full(len(returns), 1e-10), tuple(flags)

    x0 = np.array([0.05 * var, 0.05, 0.90])
    bounds = [(1e-14, 10.0 * var), (0.0, MAX_PERSISTENCE), (0.0, MAX_PERSISTENCE)]
    res = minimize(
        _garch_nll,
        x0,
        args=(resid, var),
        method="L-BFGS-B",
        bounds=bounds,
        options={"maxiter": 200, "ftol": 1e-12},
    )
    if not res.success or not np.all(np.isfinite(res.x)):
        params = GarchParams(omega=0.05 * var, alpha=0.05, beta=0.90)
        flags.append("fallback")
    else:
        omega, alpha, beta = (float(v) for v in res.x)
        if alpha + beta > MAX_PERSISTENCE:
            scale = MAX_PERSISTENCE / (alpha + beta)
            alpha, beta = alpha * scale, beta * scale
            flags.append("persistence_clipped")
        omega = max(omega, 1e-14)
        params = GarchParams(omega=omega, alpha=alpha, beta=beta)
    params.validate()
    path = garch_variance_path(resid, params, sigma2_0=var)
    return params, path, tuple(flags)


def garch_forecast(params: GarchParams, last_resid: float, last_sigma2: float) -> float:
    """One-step-ahead conditional variance."""
    return params.omega + params.alpha * last_resid**2 + params.beta * last_sigma2


# -- realized variance ----------------------------------------------------


def realized_vol(returns: np.ndarray, window: int = 20) -> float | None:
    """Mean of squared returns over the trailing window (variance units).

    Returns None when there is not enough history.
    """
    if window < 2:
        raise ValueError("window must be >= 2")
    returns = np.asarray(returns, dtype=float)
    if len(returns) < window:
        return None
    tail = returns[-window:]
    return float(np.mean(tail**2))


# -- particle-filter stochastic volatility ---------------------------------


@dataclass
class SvModel:
    mu: float
    rho: float = 0.97
    sigma_eta: float = 0.15


class SvFilter:
    """Bootstrap particle filter on log-variance AR(1) dynamics.

    log sigma2_t = mu + rho*(log sigma2_{t-1} - mu) + sigma_eta*eps_t,
    observation r_t ~ N(0, sigma2_t). Systematic resampling triggers
    when the effective sample size drops below n/2. Deterministic per
    seed; draws are consumed strictly in time order so truncating the
    future never changes the past.
    """

    def __init__(self, model: SvModel, n_particles: int, seed: int):
        if n_particles < 100:
            raise ValueError("need n_particles >= 100")
        self.model = model
        self.n = n_particles
        self.rng = substream(seed, "sv-filter")
        stat_sd = model.sigma_eta / math.sqrt(max(1e-12, 1.0 - model.rho**2))
        self.log_var = model.mu + stat_sd * self.rng.standard_normal(n_particles)
        self.weights = np.full(n_particles, 1.0 / n_particles)

    def set_model(self, model: SvModel) -> None:
        self.model = model

    def step(self, ret: float) -> float:
        """Advance one observation; returns the filtered posterior-mean variance."""
        m = self.model
        eps = self.rng.standard_normal(self.n)
        self.log_var = m.mu + m.rho * (self.log_var - m.mu) + m.sigma_eta * eps
        var = np.exp(self.log_var)
        loglik = -0.5 * (np.log(2.0 * np.pi * var) + ret**2 / var)
        logw = np.log(self.weights) + loglik
        logw -= logw.max()
        w = np.exp(logw)
        w /= w.sum()
        self.weights = w
        ess = 1.0 / float(np.sum(w**2))
        if ess < self.n / 2.0:
            self._systematic_resample()
        return float(np.sum(self.weights * np.exp(self.log_var)))

    def _systematic_resample(self) -> None:
        positions = (self.rng.uniform() + np.arange(self.n)) / self.n
        cums = np.cumsum(self.weights)
        cums[-1] = 1.0
        idx = np.searchsorted(cums, positions)
        self.log_var = self.log_var[idx]
        self.weights = np.full(self.n, 1.0 / self.n)

    @property
    def effective_sample_size(self) -> float:
        return 1.0 / float(np.sum(self.weights**2))


def particle_filter_sv(
    returns: np.ndarray,
    n_particles: int = 500,
    seed: int = 0,
    model: SvModel | None = None,
) -> np.ndarray:
    """Filtered posterior-mean variance path for a return series.

    When no model is supplied, mu is set to the log of the series'
    realized variance; rho and sigma_eta use fixed defaults.
    """
    returns = np.asarray(returns, dtype=float)
    if model is None:
        rv = float(np.mean(returns**2))
        model = SvModel(mu=math.log(max(rv, 1e-12)))
    filt = SvFilter(model, n_particles, seed)
    out = np.empty(len(returns))
    for t, r in enumerate(returns):
        out[t] = filt.step(float(r))
    return out


# -- Kalman-combined estimate ----------------------------------------------


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ks = np.arange(1, len(v) + 1)
    cond = u - css / ks > 0
    k = np.max(ks[cond])
    tau = css[k - 1] / k
    w = np.clip(v - tau, 0.0, None)
    return w / w.sum()


@dataclass
class KalmanCombiner:
    """Random-walk regression of next-day squared return on variance forecasts.

    The posterior mean is projected onto the simplex after each update;
    observation noise is tracked as an exponentially weighted mean of
    squared innovations so no future data is needed.
    """

    q: float = 1e-4
    state: np.ndarray = field(default_factory=lambda: np.full(3, 1.0 / 3.0))
    cov: np.ndarray = field(default_factory=lambda: np.eye(3) * 0.1)
    obs_noise: float = 1.0
    _noise_initialized: bool = False

    def update(self, x: np.ndarray, y: float) -> None:
        x = np.asarray(x, dtype=float)
        self.cov = self.cov + self.q * np.eye(3)
        innov = y - float(x @ self.state)
        if not self._noise_initialized:
            self.obs_noise = max(innov**2, 1e-16)
            self._noise_initialized = True
        else:
            self.obs_noise = 0.95 * self.obs_noise + 0.05 * innov**2
        s = float(x @ self.cov @ x) + max(self.obs_noise, 1e-16)
        k = (self.cov @ x) / s
        self.state = self.state + k * innov
        self.cov = self.cov - np.outer(k, x @ self.cov)
        self.state = project_simplex(self.state)

    @property
    def weights(self) -> np.ndarray:
        return project_simplex(self.state)


def combine_vols(
    dates: list[dt.date],
    components: np.ndarray,
    returns: np.ndarray,
    q: float = 1e-4,
) -> list[VolEstimate]:
    """Combine (T, 3) component variance estimates with Kalman weights.

    The filter is updated with yesterday's forecasts against today's
    squared return before today's weights are read, so the estimate at
    date t uses data through t only.
    """
    components = np.asarray(components, dtype=float)
    returns = np.asarray(returns, dtype=float)
    if components.shape != (len(dates), 3):
        raise ValueError("components must have shape (T, 3)")
    comb = KalmanCombiner(q=q)
    out: list[VolEstimate] = []
    for t in range(len(dates)):
        if t >= 1:
            comb.update(components[t - 1], returns[t] ** 2)
        w = comb.weights
        sigma2 = float(w @ components[t])
        out.append(
            VolEstimate(
                date=dates[t],
                sigma2_garch=float(components[t, 0]),
                sigma2_rv=float(components[t, 1]),
                sigma2_sv=float(components[t, 2]),
                weights=(float(w[0]), float(w[1]), float(w[2])),
                sigma2_combined=sigma2,
            )
        )
    return out


# -- market stress index ----------------------------------------------------


def stress_index(
    dates: list[dt.date],
    mean_vol_levels: np.ndarray,
    trailing_window: int = 250,
    min_history: int = 20,
) -> list[StressIndex]:
    """Trailing z-score of the annualized cross-sectional mean volatility.

    The z-score at date t uses the trailing window strictly before t;
    a zero trailing stdev or short history yields z 0 with a flag.
    """
    if trailing_window < 20:
        raise ValueError("trailing_window must be >= 20")
    levels = np.asarray(mean_vol_levels, dtype=float)
    out: list[StressIndex] = []
    for t in range(len(dates)):
        lo = max(0, t - trailing_window)
        hist = levels[lo:t]
        flags: list[str] = []
        if len(hist) < min_history:
            z = 0.0
            flags.append("insufficient_history")
        else:
            mu = float(np.mean(hist))
            sd = float(np.std(hist))
            if sd <= abs(mu) * 1e-12:  # constant history up to float noise
                z = 0.0
                flags.append("zero_trailing_stdev")
            else:
                z = float((levels[t] - mu) / sd)
        out.append(StressIndex(date=dates[t], level=float(levels[t]), zscore=z, flags=tuple(flags)))
    return out


def annualized_mean_vol(sigma2_cross_section: np.ndarray) -> float:
    """Cross-sectional mean of daily vols, annualized with sqrt(252)."""
    sig = np.sqrt(np.clip(sigma2_cross_section, 0.0, None))
    return float(np.mean(sig) * math.sqrt(252.0))


def write_variance_paths(path, estimates: list[VolEstimate]) -> None:
    """Inspection dump of one instrument's component and combined paths."""
    with open(path, "w") as fh:
        fh.write("date,sigma2_garch,sigma2_rv,sigma2_sv,w_garch,w_rv,w_sv,sigma2_combined\n")
        for e in estimates:
            fh.write(
                f"{e.date.isoformat()},{e.sigma2_garch!r},{e.sigma2_rv!r},{e.sigma2_sv!r},"
                f"{e.weights[0]!r},{e.weights[1]!r},{e.weights[2]!r},{e.sigma2_combined!r}\n"
            )
