"""Piecewise SAHARA utilities and their closed-form optimal portfolios."""

from psahara.backtest import (
    BacktestReport,
    PricePanel,
    estimate_market,
    generate_panels,
    run_backtest,
    run_backtests,
    sharpe_ratio,
    simple_return,
)
from psahara.envelope import RawPiecewiseUtility, concave_envelope, verify_envelope
from psahara.market import MarketModel
from psahara.montecarlo import SimConfig, SimResult, martingale_check, simulate
from psahara.policy import (
    OptimalPolicy,
    incentive_portfolio,
    solve_multiplier,
    terminal_wealth,
)
from psahara.utility import (
    PiecewiseLinearMap,
    PiecewiseUtility,
    UtilityPiece,
    compose_with_map,
    incentive_contract,
)
from psahara.volatility import (
    ReturnsPanel,
    VolEstimate,
    assemble_sigma,
    bs_put_price,
    historical_vol,
    implied_vol,
    mle_vol,
)

__version__ = "0.1.0"

__all__ = [
    "BacktestReport",
    "MarketModel",
    "OptimalPolicy",
    "PiecewiseLinearMap",
    "PiecewiseUtility",
    "PricePanel",
    "RawPiecewiseUtility",
    "ReturnsPanel",
    "SimConfig",
    "SimResult",
    "UtilityPiece",
    "VolEstimate",
    "assemble_sigma",
    "bs_put_price",
    "compose_with_map",
    "concave_envelope",
    "estimate_market",
    "generate_panels",
    "historical_vol",
    "implied_vol",
    "incentive_contract",
    "incentive_portfolio",
    "martingale_check",
    "mle_vol",
    "run_backtest",
    "run_backtests",
    "sharpe_ratio",
    "simple_return",
    "simulate",
    "solve_multiplier",
    "terminal_wealth",
    "verify_envelope",
    "__version__",
]
