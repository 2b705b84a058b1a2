"""Command-line entry point.

Subcommands: gen-data, backtest, grid-search, ablation, report.
Every run is reproducible from (config file, seed); the resolved
configuration is echoed into every output. Exit statuses: 0 success,
1 configuration error, 2 data error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

from .backtest import (
    BacktestEngine,
    run_ablation,
    run_backtest,
    write_ablation_table,
    write_report_files,
)
from .config import RunConfig, config_echo, load_config
from .errors import ConfigError, DataError
from .exitgrid import ExitParams, ObjectiveWeights, argmax_objective, enumerate_grid, evaluate_grid
from .marketdata import Panel, generate_synthetic_panel, load_panel

_GRID_WORKER_STATE: dict = {}


def _grid_worker_init(entries, panel, weights, cost_rate):
    _GRID_WORKER_STATE["args"] = (entries, panel, weights, cost_rate)


def _grid_worker(chunk: list[ExitParams]):
    entries, panel, weights, cost_rate = _GRID_WORKER_STATE["args"]
    return evaluate_grid(entries, panel, chunk, weights, cost_rate)


def evaluate_grid_maybe_parallel(
    entries,
    panel: Panel,
    grid: list[ExitParams],
    weights: ObjectiveWeights,
    cost_rate: float,
    workers: int,
):
    """Grid evaluation with an opt-in worker pool.

    Chunks are dispatched and reassembled in grid order, so the result
    (and therefore the argmax) is identical to the serial path.
    """
    if workers <= 1 or len(grid) < 8:
        return evaluate_grid(entries, panel, grid, weights, cost_rate)
    chunk_size = max(8, len(grid) // (workers * 4))
    chunks = [grid[i : i + chunk_size] for i in range(0, len(grid), chunk_size)]
    with ProcessPoolExecutor(
        max_workers=workers, initializer=_grid_worker_init, initargs=(entries, panel, weights, cost_rate)
    ) as pool:
        parts = list(pool.map(_grid_worker, chunks))
    out = []
    for part in parts:
        out.extend(part)
    return out


def _build_panel(cfg: RunConfig) -> Panel:
    if cfg.data.source == "synthetic":
        return generate_synthetic_panel(cfg.generator, cfg.seed)
    if cfg.data.source == "csv":
        if not cfg.data.path:
            raise ConfigError("data.source=csv requires data.path")
        return load_panel(cfg.data.path)
    raise ConfigError(f"unknown data source {cfg.data.source!r}")


def cmd_gen_data(cfg: RunConfig) -> int:
    panel = generate_synthetic_panel(cfg.generator, cfg.seed)
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, "panel.csv")
    panel.to_csv(path)
    n_bars = int(panel.present.sum())
    print(f"wrote {path}: {panel.n_instruments} instruments x {panel.n_days} days, {n_bars} bars")
    return 0


def cmd_backtest(cfg: RunConfig) -> int:
    panel = _build_panel(cfg)
    report = run_backtest(panel, cfg)
    paths = write_report_files(report, cfg.out_dir)
    m = report.metrics

    def show(x):
        return "n/a" if x is None else f"{x:.4f}"

    print(f"backtest complete: {len(report.dates)} days, {len(report.trades)} trades")
    print(
        f"annualized return {show(m['annualized_return'])}  sharpe {show(m['sharpe'])}  "
        f"max drawdown {show(m['max_drawdown'])}  win rate {show(m['win_rate'])}"
    )
    for p in paths:
        print(f"wrote {p}")
    return 0


def cmd_grid_search(cfg: RunConfig) -> int:
    panel = _build_panel(cfg)
    engine = BacktestEngine(panel, cfg)
    engine._ensure_vol_stack()
    entries = engine._training_entries()
    grid = enumerate_grid(cfg.grid.spec)
    cost_rate = engine.cost_model.fixed_round_trip_rate()
    table = evaluate_grid_maybe_parallel(
        entries, panel, grid, cfg.objective, cost_rate, cfg.parallel
    )
    best, best_obj = argmax_objective(table)

    os.makedirs(cfg.out_dir, exist_ok=True)
    csv_path = os.path.join(cfg.out_dir, "grid_objective.csv")
    with open(csv_path, "w") as fh:
        fh.write("profit_take,stop_loss,max_hold,trailing_activation,objective\n")
        for params, obj in table:
            fh.write(
                f"{params.profit_take!r},{params.stop_loss!r},{params.max_hold},"
                f"{params.trailing_activation!r},{'' if obj is None else repr(obj)}\n"
            )
    chosen = {
        "global": {
            "profit_take": best.profit_take,
            "stop_loss": best.stop_loss,
            "max_hold": best.max_hold,
            "trailing_activation": best.trailing_activation,
            "objective": best_obj,
        }
    }
    if cfg.grid.per_regime and engine.hmm is not None:
        engine._ensure_grid()
        chosen["per_regime"] = {
            str(r): {
                "profit_take": p.profit_take,
                "stop_loss": p.stop_loss,
                "max_hold": p.max_hold,
                "trailing_activation": p.trailing_activation,
            }
            for r, p in engine._regime_params.items()
        }
    best_path = os.path.join(cfg.out_dir, "grid_best.json")
    with open(best_path, "w") as fh:
        json.dump({"config": config_echo(cfg), "chosen": chosen}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"evaluated {len(table)} grid points over {len(entries)} entries")
    print(
        f"best: pt={best.profit_take} sl={best.stop_loss} mhp={best.max_hold} "
        f"tsa={best.trailing_activation} objective={best_obj:.6f}"
    )
    print(f"wrote {csv_path}")
    print(f"wrote {best_path}")
    return 0


def cmd_ablation(cfg: RunConfig) -> int:
    panel = _build_panel(cfg)
    reports = run_ablation(panel, cfg)
    path = write_ablation_table(reports, cfg.out_dir)
    print(f"{'configuration':<24} {'return':>9} {'sharpe':>8} {'maxdd':>8} {'win':>7}")
    for rep in reports:
        m = rep.metrics

        def show(x, pct=False):
            if x is None:
                return "n/a"
            return f"{x * 100:.2f}%" if pct else f"{x:.2f}"

        print(
            f"{rep.label:<24} {show(m['annualized_return'], True):>9} {show(m['sharpe']):>8} "
            f"{show(m['max_drawdown'], True):>8} {show(m['win_rate'], True):>7}"
        )
    print(f"wrote {path}")
    return 0


def cmd_report(cfg: RunConfig) -> int:
    path = os.path.join(cfg.out_dir, "report.json")
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    print(f"report: {payload.get('label', '?')} (seed {payload.get('seed', '?')})")
    for key, val in sorted(payload.get("metrics", {}).items()):
        if key == "flags":
            continue
        print(f"  {key:<24} {val if val is not None else 'n/a'}")
    costs = payload.get("cost_breakdown", {})
    if costs:
        print("  cost breakdown:")
        for k in ("commission", "stamp_tax", "impact", "spread", "total"):
            if k in costs:
                print(f"    {k:<20} {costs[k]:.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mdturn", description=__doc__)
    sub = parser.add_subparsers(dest="command")
    for name, fn in (
        ("gen-data", cmd_gen_data),
        ("backtest", cmd_backtest),
        ("grid-search", cmd_grid_search),
        ("ablation", cmd_ablation),
        ("report", cmd_report),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="path to the INI run-configuration file")
        p.add_argument("--seed", type=int, default=None, help="override the global seed")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--parallel", type=int, default=None, help="worker-pool size for the grid")
        p.add_argument("--grid", default=None, help="grid override, e.g. 'pt=1,2;sl=1;mhp=3,5;tsa=2'")
        p.set_defaults(func=fn)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    if not getattr(args, "command", None):
        parser.print_usage()
        return 1
    try:
        cfg = load_config(
            args.config,
            overrides={
                "seed": args.seed,
                "out": args.out,
                "parallel": args.parallel,
                "grid": args.grid,
            },
        )
        return args.func(cfg)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failures map to 3
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
