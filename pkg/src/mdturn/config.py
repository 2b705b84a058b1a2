"""Run configuration: one INI-style file drives every pipeline stage.

Sections map to pipeline stages; every key has a default, so an empty
file is a valid (if slow) full run. Split points accept either a
calendar index or an ISO date. The resolved configuration is echoed
into every report for reproducibility.
"""

from __future__ import annotations

import configparser
import dataclasses
import datetime as dt
from dataclasses import dataclass, field

from .crosssection import NetworkConfig
from .errors import ConfigError
from .exitgrid import ExitParams, GridSpec, ObjectiveWeights
from .marketdata import GeneratorConfig, Panel, UniverseRules
from .sizing import ConstraintSet


@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | csv
    path: str = ""


@dataclass
class SplitConfig:
    train_end: str = ""  # index or ISO date; default: 2/3 of the calendar
    test_start: str = ""
    test_end: str = ""  # default: last day
    retrain_every: int = 21


@dataclass
class FeaturesConfig:
    winsor_lower: float = 0.01
    winsor_upper: float = 0.99
    epsilon: float = 1e-8
    fill_halflife: float = 5.0


@dataclass
class OpeningConfig:
    # the signal is a fitted open-to-close return forecast, so the
    # threshold lives on that scale: slightly below center, tightening
    # with recent market volatility
    theta0: float = -0.002
    beta: float = 0.2
    phi: float = 0.55
    psi_quantile: float = 0.6
    decay: float = 0.99
    gmm_lambda: float = 1.0
    min_signal_samples: int = 10
    weight_window: int = 250


@dataclass
class VolatilityConfig:
    rv_window: int = 20
    sv_particles: int = 200
    sv_rho: float = 0.97
    sv_sigma_eta: float = 0.15
    kalman_q: float = 1e-4
    stress_window: int = 250
    warmup_days: int = 150


@dataclass
class SizingConfig:
    constraints: ConstraintSet = field(default_factory=ConstraintSet)
    max_participation: float = 0.10
    inverted_liquidity: bool = False
    scale_floor: float = 0.25
    scale_cap: float = 1.25


@dataclass
class GridConfig:
    spec: GridSpec = field(default_factory=GridSpec)
    per_regime: bool = True
    min_regime_days: int = 30
    entries_per_day: int = 10
    window_days: int = 250


@dataclass
class TimingConfig:
    betas: tuple[float, float, float] = (0.6, 0.3, 0.1)
    n_trees: int = 50
    depth: int = 3
    shrinkage: float = 0.1
    label_horizon: int = 5
    min_regime_samples: int = 50


@dataclass
class CostConfig:
    commission_bps: float = 5.0
    stamp_bps: float = 10.0
    spread_bps: float = 2.1
    impact_coeff: float = 0.5
    stamp_both_sides: bool = False


@dataclass
class EngineConfig:
    initial_equity: float = 1e8
    max_positions: int = 100
    min_positions: int = 50
    risk_free: float = 0.02
    candidate_multiple: int = 3
    default_exit: ExitParams = field(
        default_factory=lambda: ExitParams(profit_take=0.03, stop_loss=0.015, max_hold=9, trailing_activation=0.025)
    )
    collect_diagnostics: bool = False


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    universe: UniverseRules = field(default_factory=UniverseRules)
    features: FeaturesConfig = field(default_factory=FeaturesConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    opening: OpeningConfig = field(default_factory=OpeningConfig)
    volatility: VolatilityConfig = field(default_factory=VolatilityConfig)
    sizing: SizingConfig = field(default_factory=SizingConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    objective: ObjectiveWeights = field(default_factory=ObjectiveWeights)
    timing: TimingConfig = field(default_factory=TimingConfig)
    costs: CostConfig = field(default_factory=CostConfig)
    engine: EngineConfig = field(default_factory=EngineConfig)
    seed: int = 42
    out_dir: str = "out"
    parallel: int = 1


def _parse_value(text: str, like) -> object:
    text = text.strip()
    if isinstance(like, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected boolean, got {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, dt.date):
        return dt.date.fromisoformat(text)
    if isinstance(like, tuple):
        parts = [p for p in text.replace(",", " ").split() if p]
        elem = like[0] if like else 0.0
        return tuple(_parse_value(p, elem) for p in parts)
    return text


def _fill_dataclass(obj, section: configparser.SectionProxy, where: str):
    updates = {}
    names = {f.name for f in dataclasses.fields(obj)}
    for key in section:
        if key not in names:
            raise ConfigError(f"unknown key {key!r} in section [{where}]")
        try:
            updates[key] = _parse_value(section[key], getattr(obj, key))
        except (ValueError, TypeError) as e:
            raise ConfigError(f"[{where}] {key}: {e}") from e
    return dataclasses.replace(obj, **updates) if updates else obj


def load_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Parse the INI file (all sections optional) and apply CLI overrides."""
    cfg = RunConfig()
    if path:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"cannot read config file {path}")
        section_map = {
            "data": "data",
            "generator": "generator",
            "split": "split",
            "universe": "universe",
            "features": "features",
            "network": "network",
            "opening": "opening",
            "volatility": "volatility",
            "sizing": "sizing",
            "grid": "grid",
            "objective": "objective",
            "timing": "timing",
            "costs": "costs",
            "engine": "engine",
        }
        for name in parser.sections():
            if name == "run":
                sec = parser["run"]
                for key in sec:
                    if key == "seed":
                        cfg.seed = int(sec[key])
                    elif key == "out":
                        cfg.out_dir = sec[key]
                    elif key == "parallel":
                        cfg.parallel = int(sec[key])
                    else:
                        raise ConfigError(f"unknown key {key!r} in section [run]")
                continue
            if name == "constraints":
                cfg.sizing.constraints = _fill_dataclass(cfg.sizing.constraints, parser[name], name)
                continue
            if name == "gridspec":
                cfg.grid.spec = _fill_dataclass(cfg.grid.spec, parser[name], name)
                continue
            if name == "default_exit":
                cfg.engine.default_exit = _fill_dataclass(cfg.engine.default_exit, parser[name], name)
                continue
            if name not in section_map:
                raise ConfigError(f"unknown config section [{name}]")
            attr = section_map[name]
            setattr(cfg, attr, _fill_dataclass(getattr(cfg, attr), parser[name], name))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == "seed":
            cfg.seed = int(value)
        elif key == "out":
            cfg.out_dir = str(value)
        elif key == "parallel":
            cfg.parallel = int(value)
        elif key == "grid":
            cfg.grid.spec = parse_grid_override(str(value))
        else:
            raise ConfigError(f"unknown override {key!r}")
    cfg.network.validate()
    cfg.objective.validate()
    cfg.sizing.constraints.validate()
    return cfg


def parse_grid_override(text: str) -> GridSpec:
    """Parse 'pt=1,2;sl=1;mhp=3,5;tsa=2' (percent units for pt/sl/tsa)."""
    fields = {}
    for chunk in text.split(";"):
        if not chunk.strip():
            continue
        if "=" not in chunk:
            raise ConfigError(f"bad grid override chunk {chunk!r}")
        key, vals = chunk.split("=", 1)
        key = key.strip().lower()
        nums = [float(v) for v in vals.replace(",", " ").split()]
        if key == "pt":
            fields["pt_levels"] = tuple(v / 100.0 for v in nums)
        elif key == "sl":
            fields["sl_levels"] = tuple(v / 100.0 for v in nums)
        elif key == "tsa":
            fields["tsa_levels"] = tuple(v / 100.0 for v in nums)
        elif key == "mhp":
            fields["mhp_levels"] = tuple(int(v) for v in nums)
        else:
            raise ConfigError(f"unknown grid dimension {key!r}")
    return GridSpec(**fields)


def resolve_index(panel: Panel, value: str, default: int) -> int:
    """Index for a split point given as an index, an ISO date, or empty."""
    text = str(value).strip()
    if not text:
        return default
    try:
        idx = int(text)
        if not 0 <= idx < panel.n_days:
            raise ConfigError(f"split index {idx} outside panel calendar (0..{panel.n_days - 1})")
        return idx
    except ValueError:
        pass
    try:
        date = dt.date.fromisoformat(text)
    except ValueError:
        raise ConfigError(f"split point {text!r} is neither an index nor an ISO date") from None
    if date not in panel._date_idx:
        raise ConfigError(f"split date {date} not in panel calendar")
    return panel.date_index(date)


def config_echo(cfg: RunConfig) -> dict:
    """Nested plain-dict form of the resolved configuration.

    Delivery knobs (output directory, worker-pool size) are excluded:
    they cannot change results, and reports from identical (config,
    seed) must be byte-identical wherever they are written.
    """

    def conv(obj):
        if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
            return {f.name: conv(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        if isinstance(obj, dt.date):
            return obj.isoformat()
        if isinstance(obj, tuple):
            return list(obj)
        return obj

    out = conv(cfg)
    out.pop("out_dir", None)
    out.pop("parallel", None)
    return out
