"""mdturn: event-driven daily-rebalance backtesting engine with a
five-stage multi-day turnover strategy pipeline (cross-sectional
ranking network, opening-signal mixture gate, constrained position
sizing, grid-optimized regime-aware exits, volatility timing).
"""

__version__ = "0.1.0"
