"""Daily-rebalanced backtest of the optimal policy over a price panel.

The live state is the pricing kernel, tracked by pulling Brownian increments
out of realized log returns through the volatility loadings.  Wealth accrues
by realized asset returns on the holdings and the risk-free rate on the
residual, so the accounting is self-financing to machine precision per step.

Panels are independent scenarios; `run_backtests` evolves a whole stack of
them in one vectorized time loop.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from psahara.market import MarketModel
from psahara.policy import OptimalPolicy
from psahara.volatility import (
    ReturnsPanel,
    assemble_sigma,
    historical_vol,
    mle_vol,
    read_csv_table,
)

__all__ = [
    "BacktestReport",
    "PricePanel",
    "estimate_market",
    "generate_panels",
    "run_backtest",
    "run_backtests",
    "sharpe_ratio",
    "simple_return",
]

HORIZON_TOL = 1e-9
SELF_FINANCING_TOL = 1e-12


@dataclass(frozen=True)
class PricePanel:
    """Adjusted close prices, one row per day, one column per asset."""

    prices: np.ndarray
    dates: tuple[str, ...] = ()

    def __post_init__(self):
        arr = np.asarray(self.prices, dtype=float)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2 or arr.shape[0] < 2:
            raise ValueError("prices must be a (n_days, n_assets) array with at least 2 rows")
        if not np.all(np.isfinite(arr)) or np.any(arr <= 0.0):
            raise ValueError("prices must be positive and finite")
        if self.dates:
            if len(self.dates) != arr.shape[0]:
                raise ValueError("dates length must match the number of rows")
            if any(a >= b for a, b in zip(self.dates, self.dates[1:])):
                raise ValueError("dates must be strictly increasing")
        object.__setattr__(self, "prices", arr)
        object.__setattr__(self, "dates", tuple(self.dates))

    @property
    def n_days(self) -> int:
        return self.prices.shape[0]

    @property
    def n_assets(self) -> int:
        return self.prices.shape[1]

    def log_returns(self, h: float) -> ReturnsPanel:
        return ReturnsPanel(
            returns=np.diff(np.log(self.prices), axis=0),
            h=h,
            dates=self.dates[1:] if self.dates else (),
        )

    def window(self, start: int, stop: int) -> "PricePanel":
        return PricePanel(
            prices=self.prices[start:stop],
            dates=self.dates[start:stop] if self.dates else (),
        )

    @classmethod
    def from_csv(cls, path) -> "PricePanel":
        dates, values, _ = read_csv_table(path)
        return cls(prices=values, dates=dates)

    def to_csv(self, path, asset_names=None) -> None:
        names = list(asset_names or (f"asset{i + 1}" for i in range(self.n_assets)))
        dates = self.dates or tuple(f"{i:06d}" for i in range(self.n_days))
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["date", *names])
            for date, row in zip(dates, self.prices):
                writer.writerow([date, *(repr(v) for v in row.tolist())])


@dataclass(frozen=True)
class BacktestReport:
    """Wealth and kernel paths with the headline performance statistics."""

    times: np.ndarray
    wealth: np.ndarray
    kernel: np.ndarray
    holdings: np.ndarray
    daily_returns: np.ndarray
    max_drawdown: float
    trough_index: int

    @property
    def simple_return(self) -> float:
        return (float(self.wealth[-1]) - float(self.wealth[0])) / float(self.wealth[0])

    def summary(self) -> dict:
        return {
            "x0": float(self.wealth[0]),
            "terminal_wealth": float(self.wealth[-1]),
            "simple_return": self.simple_return,
            "max_drawdown": self.max_drawdown,
            "trough_index": self.trough_index,
            "trough_wealth": float(self.wealth[self.trough_index]),
        }


def simple_return(report: BacktestReport) -> float:
    """(X_T - X_0) / X_0 from the stored path endpoints."""
    return report.simple_return


def sharpe_ratio(report_or_returns, risk_free: float = 0.0) -> float:
    """Mean daily return over ``risk_free``, scaled by the excess-return
    standard deviation."""
    if isinstance(report_or_returns, BacktestReport):
        returns = report_or_returns.daily_returns
    else:
        returns = np.asarray(report_or_returns, dtype=float)
    if returns.size < 2:
        raise ValueError("need at least 2 return observations")
    excess_sd = float(np.std(returns - risk_free, ddof=1))
    mean = float(np.mean(returns))
    if excess_sd <= 1e-14 * max(1.0, abs(mean)):
        raise ValueError("zero return dispersion, ratio undefined")
    return (mean - risk_free) / excess_sd


def run_backtests(
    policy: OptimalPolicy, panels: list[PricePanel], h: float = 1.0 / 252.0
) -> list[BacktestReport]:
    """Run one policy over many equally shaped panels in a single time loop."""
    if not panels:
        return []
    market = policy.market
    shapes = {p.prices.shape for p in panels}
    if len(shapes) != 1:
        raise ValueError("all panels must share one shape")
    prices = np.stack([p.prices for p in panels])
    n_panels, n_days, n_assets = prices.shape
    n_steps = n_days - 1
    if n_assets != market.n_assets:
        raise ValueError(f"panel has {n_assets} assets, market prices {market.n_assets}")
    if abs(n_steps * h - market.horizon) > HORIZON_TOL * max(1.0, market.horizon):
        raise ValueError(
            f"panel spans {n_steps * h} years but the policy horizon is {market.horizon}"
        )

    times = np.arange(n_days) * h
    log_prices = np.log(prices)

    wealth = np.empty((n_panels, n_days))
    kernel = np.empty((n_panels, n_days))
    holdings = np.empty((n_panels, n_steps, n_assets))
    wealth[:, 0] = policy.x0
    kernel[:, 0] = 1.0
    log_xi = np.zeros(n_panels)

    for i in range(n_steps):
        t = times[i]
        sig = market.sigma_at(t)
        gram = sig @ sig.T
        mu = market.drift_at(t)
        theta = market.theta(t)
        rate_step = market.rate_integral(t, times[i + 1])
        var_step = market.theta_sq_integral(t, times[i + 1])

        xi = np.exp(log_xi)
        position = np.asarray(policy.portfolio(t, xi).total)
        holdings[:, i, :] = position

        d_log = log_prices[:, i + 1, :] - log_prices[:, i, :]
        cash_growth = math.expm1(rate_step)
        invested = position.sum(axis=1)
        wealth[:, i + 1] = (
            wealth[:, i]
            + (position * np.expm1(d_log)).sum(axis=1)
            + (wealth[:, i] - invested) * cash_growth
        )

        pullback = np.linalg.solve(gram, (d_log - (mu - 0.5 * np.diag(gram)) * h).T)
        increments = sig.T @ pullback
        log_xi = log_xi - rate_step - 0.5 * var_step - theta @ increments
        kernel[:, i + 1] = np.exp(log_xi)

    reports = []
    for p in range(n_panels):
        path = wealth[p]
        running_peak = np.maximum.accumulate(path)
        drawdown = running_peak - path
        trough = int(np.argmax(drawdown))
        reports.append(
            BacktestReport(
                times=times,
                wealth=path,
                kernel=kernel[p],
                holdings=holdings[p],
                daily_returns=np.diff(path) / path[:-1],
                max_drawdown=float(drawdown[trough]),
                trough_index=trough,
            )
        )
    return reports


def run_backtest(policy: OptimalPolicy, panel: PricePanel, h: float = 1.0 / 252.0) -> BacktestReport:
    """Backtest one panel; see `run_backtests`."""
    return run_backtests(policy, [panel], h)[0]


def estimate_market(
    panel: PricePanel,
    horizon: float,
    rate: float,
    h: float = 1.0 / 252.0,
    estimator: str = "historical",
    implied_norms=None,
    allow_degenerate: bool = False,
) -> MarketModel:
    """Constant-coefficient market fitted to an estimation panel.

    The drift is the annualized mean log return plus half the estimated
    quadratic variation; the volatility matrix comes from the chosen
    estimator.  The implied route spreads externally supplied per-asset
    norms over the panel's correlation.
    """
    returns = panel.log_returns(h)
    if estimator == "historical":
        estimate = historical_vol(returns)
    elif estimator == "mle":
        norms = np.sqrt(mle_vol(returns))
        estimate = assemble_sigma(norms, returns.correlation())
    elif estimator == "implied":
        if implied_norms is None:
            raise ValueError("the implied estimator needs per-asset implied_norms")
        estimate = assemble_sigma(np.asarray(implied_norms, dtype=float), returns.correlation())
    else:
        raise ValueError(f"unknown estimator {estimator!r}")
    drift = returns.returns.mean(axis=0) / h + 0.5 * np.diag(estimate.covariance)
    return MarketModel(
        horizon=horizon,
        rate=rate,
        drift=drift,
        sigma=estimate.sigma,
        steps_per_year=max(1, round(1.0 / h)),
        allow_degenerate=allow_degenerate,
    )


def generate_panels(
    market: MarketModel,
    n_steps: int,
    n_panels: int,
    seed: int,
    s0: float = 100.0,
    method: str = "exact",
) -> tuple[list[PricePanel], np.ndarray]:
    """Synthetic price panels under the market's own dynamics.

    ``method="exact"`` steps lognormal prices without time-step error;
    ``method="euler"`` compounds simple returns ``1 + mu h + sigma dW``.
    Also returns the true kernel paths (n_panels, n_steps + 1) driven by the
    same draws.
    """
    if method not in ("exact", "euler"):
        raise ValueError(f"unknown method {method!r}")
    if n_steps < 1 or n_panels < 1:
        raise ValueError("n_steps and n_panels must be positive")
    h = market.horizon / n_steps
    m, q = market.n_assets, market.n_factors
    rng = np.random.default_rng(np.random.Philox(seed))
    shocks = rng.standard_normal((n_panels, n_steps, q)) * math.sqrt(h)

    prices = np.empty((n_panels, n_steps + 1, m))
    prices[:, 0, :] = s0
    kernel = np.empty((n_panels, n_steps + 1))
    kernel[:, 0] = 1.0
    log_xi = np.zeros(n_panels)
    for i in range(n_steps):
        t = i * h
        sig = market.sigma_at(t)
        mu = market.drift_at(t)
        theta = market.theta(t)
        rate_step = market.rate_integral(t, (i + 1) * h)
        var_step = market.theta_sq_integral(t, (i + 1) * h)
        risky = shocks[:, i, :] @ sig.T
        if method == "exact":
            prices[:, i + 1, :] = prices[:, i, :] * np.exp(
                (mu - 0.5 * np.diag(sig @ sig.T)) * h + risky
            )
        else:
            growth = 1.0 + mu * h + risky
            if np.any(growth <= 0.0):
                raise ValueError("euler price step went nonpositive; refine the grid")
            prices[:, i + 1, :] = prices[:, i, :] * growth
        log_xi = log_xi - rate_step - 0.5 * var_step - shocks[:, i, :] @ theta
        kernel[:, i + 1] = np.exp(log_xi)

    dates = tuple(f"{i:06d}" for i in range(n_steps + 1))
    panels = [PricePanel(prices=prices[p], dates=dates) for p in range(n_panels)]
    return panels, kernel
