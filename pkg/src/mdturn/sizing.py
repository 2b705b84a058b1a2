"""Position sizing: multi-factor base weights, liquidity adjustment,
constrained projection, and stress scaling.

The constraint projection minimizes squared tracking error to the
budget-scaled targets subject to per-name box, per-sector cap,
large-cap band, and gross-budget constraints. Because that is exactly
the Euclidean projection onto an intersection of convex sets, it is
solved with Dykstra's alternating-projection scheme, which converges to
the unique optimum.
"""

from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InfeasibleError
from .volatility import StressIndex


@dataclass(frozen=True)
class SizingInputs:
    instrument_id: str
    score: float
    market_cap: float
    momentum: float  # 1 + trailing 20-day return; must be positive to size
    adv: float  # 20-day mean daily volume in currency
    volatility: float  # annualized
    target_volume: float  # currency the strategy intends to trade

    def validate(self) -> None:
        if self.adv <= 0 or self.volatility <= 0 or self.market_cap <= 0:
            raise ValueError(
                f"{self.instrument_id}: adv, volatility, market_cap must be positive"
            )


@dataclass(frozen=True)
class ConstraintSet:
    w_min: float = 0.005
    w_max: float = 0.02
    sector_cap: float = 0.25
    largecap_min: float = 0.20
    largecap_max: float = 0.60
    largecap_quantile: float = 0.30  # top fraction of universe by market cap
    budget: float = 1.0

    def validate(self) -> None:
        if not 0 <= self.w_min < self.w_max:
            raise ConfigError("need 0 <= w_min < w_max")
        if not self.largecap_min < self.largecap_max:
            raise ConfigError("need largecap_min < largecap_max")
        if self.sector_cap <= 0 or self.budget <= 0:
            raise ConfigError("sector_cap and budget must be positive")


@dataclass
class PortfolioWeights:
    date: dt.date | None
    instruments: tuple[str, ...]
    weights: np.ndarray
    binding: tuple[str, ...] = ()
    flags: tuple[str, ...] = ()

    def as_dict(self) -> dict[str, float]:
        return {inst: float(w) for inst, w in zip(self.instruments, self.weights)}

    def scaled(self, factor: float, w_max: float | None = None) -> "PortfolioWeights":
        w = self.weights * factor
        if w_max is not None:
            w = np.minimum(w, w_max)
        return PortfolioWeights(self.date, self.instruments, w, self.binding, self.flags)


# -- base weight and liquidity factor ------------------------------------------


def base_weight(inputs: SizingInputs, liquidity: float = 1.0) -> float:
    """Multi-factor raw weight.

    w = score * sqrt(market_cap) * momentum^0.2 / (adv^0.3 * vol^0.5) * liquidity.
    Raises ValueError on nonpositive momentum; callers skip and flag
    such instruments.
    """
    inputs.validate()
    if inputs.momentum <= 0:
        raise ValueError(f"{inputs.instrument_id}: momentum must be positive after shift")
    return (
        inputs.score
        * math.sqrt(inputs.market_cap)
        * inputs.momentum**0.2
        / (inputs.adv**0.3 * inputs.volatility**0.5)
        * liquidity
    )


def liquidity_factor(
    target_volume: float,
    adv: float,
    max_participation: float = 0.10,
    inverted: bool = False,
) -> float:
    """Participation-capped liquidity multiplier in (0, 1].

    The printed form min(1, target / (adv * participation)) shrinks
    small orders; `inverted` switches to min(1, adv * participation /
    target), which shrinks orders that would exceed the participation
    cap instead.
    """
    if adv <= 0:
        raise ValueError("adv must be positive")
    if not 0 < max_participation <= 1:
        raise ValueError("max_participation must be in (0, 1]")
    if target_volume <= 0:
        raise ValueError("target_volume must be positive")
    if inverted:
        return min(1.0, adv * max_participation / target_volume)
    return min(1.0, target_volume / (adv * max_participation))


def largecap_mask(market_caps: np.ndarray, top_fraction: float = 0.30) -> np.ndarray:
    """True for instruments in the top `top_fraction` by market cap."""
    caps = np.asarray(market_caps, dtype=float)
    n_top = max(1, int(round(top_fraction * len(caps))))
    order = np.argsort(-caps, kind="stable")
    mask = np.zeros(len(caps), dtype=bool)
    mask[order[:n_top]] = True
    return mask


# -- constrained projection -----------------------------------------------------


def _feasibility_precheck(
    n: int,
    cons: ConstraintSet,
    sectors: list[str],
    lc_mask: np.ndarray,
    sector_caps: dict[str, float],
) -> None:
    if n * cons.w_max < cons.budget - 1e-12:
        raise InfeasibleError(
            f"budget {cons.budget} exceeds max gross {n * cons.w_max} from {n} names at w_max"
        )
    if n * cons.w_min > cons.budget + 1e-12:
        raise InfeasibleError(
            f"budget {cons.budget} below min gross {n * cons.w_min} from {n} names at w_min"
        )
    uniq = sorted(set(sectors))
    capacity = 0.0
    for s in uniq:
        n_s = sectors.count(s)
        if n_s * cons.w_min > sector_caps[s] + 1e-12:
            raise InfeasibleError(f"sector {s}: {n_s} names at w_min exceed sector cap")
        capacity += min(sector_caps[s], n_s * cons.w_max)
    if capacity < cons.budget - 1e-12:
        raise InfeasibleError("sector caps cannot absorb the gross budget")
    n_lc = int(np.sum(lc_mask))
    lc_lo = max(n_lc * cons.w_min, cons.budget - (n - n_lc) * cons.w_max)
    lc_hi = min(n_lc * cons.w_max, cons.budget - (n - n_lc) * cons.w_min)
    if lc_hi < cons.largecap_min - 1e-12 or lc_lo > cons.largecap_max + 1e-12:
        raise InfeasibleError(
            f"large-cap band [{cons.largecap_min}, {cons.largecap_max}] unreachable "
            f"(achievable [{lc_lo:.4f}, {lc_hi:.4f}])"
        )


def project_constraints(
    raw: np.ndarray,
    constraints: ConstraintSet,
    sectors: list[str],
    lc_mask: np.ndarray,
    instruments: tuple[str, ...] | None = None,
    date: dt.date | None = None,
    max_cycles: int = 20000,
    tol: float = 1e-11,
    sector_caps: dict[str, float] | None = None,
) -> PortfolioWeights:
    """Project budget-scaled targets onto the constraint polytope.

    Dykstra's algorithm over: the box [w_min, w_max]^n, the budget
    hyperplane, each sector's cap halfspace, and the two large-cap band
    halfspaces. Converges to the tracking-error minimizer; binding
    constraints are reported by name. `sector_caps` overrides the
    uniform cap per sector (held positions shrink the room left).
    """
    constraints.validate()
    raw = np.asarray(raw, dtype=float)
    n = len(raw)
    if n == 0:
        raise InfeasibleError("no instruments selected")
    if np.any(raw < 0):
        raise ValueError("raw weights must be nonnegative")
    lc_mask = np.asarray(lc_mask, dtype=bool)
    caps = {s: constraints.sector_cap for s in set(sectors)}
    if sector_caps:
        caps.update(sector_caps)
    _feasibility_precheck(n, constraints, list(sectors), lc_mask, caps)

    total = raw.sum()
    target = np.full(n, constraints.budget / n) if total <= 0 else raw * (constraints.budget / total)

    sec_names = sorted(set(sectors))
    sec_rows = {s: np.array([i for i, x in enumerate(sectors) if x == s]) for s in sec_names}

    # each set projector takes and returns a weight vector
    def proj_box(w):
        return np.clip(w, constraints.w_min, constraints.w_max)

    def proj_budget(w):
        return w + (constraints.budget - w.sum()) / n

    def make_proj_cap(rows, cap):
        def proj(w):
            s = w[rows].sum()
            if s > cap:
                w = w.copy()
                w[rows] -= (s - cap) / len(rows)
            return w

        return proj

    def make_proj_floor(rows, floor):
        def proj(w):
            s = w[rows].sum()
            if s < floor:
                w = w.copy()
                w[rows] += (floor - s) / len(rows)
            return w

        return proj

    projectors = [proj_box, proj_budget]
    projectors += [make_proj_cap(sec_rows[s], caps[s]) for s in sec_names]
    if np.any(lc_mask):
        lc_rows = np.flatnonzero(lc_mask)
        projectors.append(make_proj_cap(lc_rows, constraints.largecap_max))
        projectors.append(make_proj_floor(lc_rows, constraints.largecap_min))

    w = target.copy()
    increments = [np.zeros(n) for _ in projectors]
    for cycle in range(max_cycles):
        w_prev = w.copy()
        for j, proj in enumerate(projectors):
            y = w + increments[j]
            w = proj(y)
            increments[j] = y - w
        if np.max(np.abs(w - w_prev)) < tol and _violation(w, constraints, sec_rows, lc_mask, caps) < 1e-10:
            break
    else:
        if _violation(w, constraints, sec_rows, lc_mask, caps) > 1e-6:
            raise InfeasibleError("projection failed to converge; constraint system likely infeasible")

    w = np.clip(w, constraints.w_min, constraints.w_max)
    binding = []
    if np.any(np.abs(w - constraints.w_max) < 1e-9):
        binding.append("w_max")
    if np.any(np.abs(w - constraints.w_min) < 1e-9):
        binding.append("w_min")
    for s in sec_names:
        if abs(w[sec_rows[s]].sum() - caps[s]) < 1e-9:
            binding.append(f"sector:{s}")
    if np.any(lc_mask):
        lc_sum = w[lc_mask].sum()
        if abs(lc_sum - constraints.largecap_max) < 1e-9:
            binding.append("largecap_max")
        if abs(lc_sum - constraints.largecap_min) < 1e-9:
            binding.append("largecap_min")
    insts = instruments or tuple(f"I{i}" for i in range(n))
    return PortfolioWeights(date=date, instruments=tuple(insts), weights=w, binding=tuple(binding))


def _violation(w, cons: ConstraintSet, sec_rows, lc_mask, caps) -> float:
    v = max(0.0, float(np.max(w - cons.w_max)), float(np.max(cons.w_min - w)))
    v = max(v, abs(float(w.sum()) - cons.budget))
    for s, rows in sec_rows.items():
        v = max(v, float(w[rows].sum() - caps[s]))
    if np.any(lc_mask):
        s = float(w[lc_mask].sum())
        v = max(v, s - cons.largecap_max, cons.largecap_min - s)
    return v


# -- stress scaling ---------------------------------------------------------------


def volatility_scale(
    weights: PortfolioWeights,
    stress: StressIndex,
    w_max: float,
    factor_floor: float = 0.25,
    factor_cap: float = 1.25,
) -> PortfolioWeights:
    """Scale all weights by clamp(1 - 0.5*z, floor, cap), re-capping at w_max.

    The raw factor goes negative for extreme stress z-scores, hence the
    clamp; the lower box bound is deliberately not re-imposed, since
    stress scaling is meant to shrink exposure.
    """
    if not np.isfinite(stress.zscore):
        raise ValueError("stress zscore must be finite")
    factor = min(max(1.0 - 0.5 * stress.zscore, factor_floor), factor_cap)
    out = weights.scaled(factor, w_max=w_max)
    out.flags = tuple(set(out.flags) | {f"stress_factor={factor:.4f}"})
    return out
