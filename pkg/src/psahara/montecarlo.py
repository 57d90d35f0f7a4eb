"""Path simulation under the optimal policy.

The kernel is stepped exactly (its log increments are Gaussian with the
per-cell drift and variance), while wealth is evolved two ways on the same
Brownian increments: closed-form evaluation of the optimal wealth map, and
Euler-Maruyama with the left-point allocation.  The terminal gap between the
two is the replication error, which shrinks at order sqrt(dt).

Paths are split into fixed-size row chunks processed by a thread pool capped
by the PSAHARA_THREADS environment variable.  Chunk boundaries and reduction
order never depend on the worker count, so results are bit-identical for any
thread setting.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from psahara.policy import OptimalPolicy

__all__ = ["SimConfig", "SimResult", "martingale_check", "simulate"]

CHUNK_ROWS = 4096

CHECKPOINT_FRACTIONS = (0.25, 0.5, 0.75, 1.0)


def _worker_count() -> int:
    raw = os.environ.get("PSAHARA_THREADS", "")
    if raw.strip():
        try:
            return max(1, int(raw))
        except ValueError as exc:
            raise ValueError(f"PSAHARA_THREADS must be an integer, got {raw!r}") from exc
    return min(os.cpu_count() or 1, 8)


@dataclass(frozen=True)
class SimConfig:
    """Simulation size, seed, and variance-reduction switch."""

    n_paths: int
    n_steps: int
    seed: int = 0
    antithetic: bool = False

    def __post_init__(self):
        if self.n_paths < 2:
            raise ValueError("n_paths must be at least 2")
        if self.n_steps < 1:
            raise ValueError("n_steps must be at least 1")
        if self.antithetic and self.n_paths % 2 != 0:
            raise ValueError("antithetic pairing needs an even n_paths")


@dataclass(frozen=True)
class SimResult:
    """Samples and per-step statistics from one simulation run.

    ``terminal_wealth`` holds the closed-form branch, ``terminal_wealth_euler``
    the discretized one.  ``checkpoint_*`` are the deflated-wealth martingale
    statistics at interior checkpoints and the horizon.  Per-step wealth
    statistics describe the Euler branch (the closed form is evaluated only at
    checkpoints and the horizon).
    """

    config: SimConfig
    x0: float
    times: np.ndarray
    kernel_mean: np.ndarray
    kernel_std: np.ndarray
    wealth_mean: np.ndarray
    wealth_std: np.ndarray
    terminal_kernel: np.ndarray
    terminal_wealth: np.ndarray
    terminal_wealth_euler: np.ndarray
    checkpoint_times: np.ndarray
    checkpoint_budget_mean: np.ndarray
    checkpoint_budget_se: np.ndarray
    max_portfolio_norm: float
    portfolio_integral_quantiles: dict[str, float]

    @property
    def replication_gap(self) -> float:
        return float(np.mean(np.abs(self.terminal_wealth - self.terminal_wealth_euler)))

    @property
    def martingale_residuals(self) -> np.ndarray:
        return self.checkpoint_budget_mean - self.x0

    def summary(self) -> dict:
        """JSON-ready digest of the run."""
        return {
            "n_paths": self.config.n_paths,
            "n_steps": self.config.n_steps,
            "seed": self.config.seed,
            "antithetic": self.config.antithetic,
            "x0": self.x0,
            "terminal_wealth_mean": float(np.mean(self.terminal_wealth)),
            "terminal_wealth_std": float(np.std(self.terminal_wealth, ddof=1)),
            "replication_gap": self.replication_gap,
            "checkpoints": [
                {
                    "t": float(t),
                    "budget_mean": float(m),
                    "budget_se": float(se),
                    "residual": float(m - self.x0),
                }
                for t, m, se in zip(
                    self.checkpoint_times,
                    self.checkpoint_budget_mean,
                    self.checkpoint_budget_se,
                )
            ],
            "max_portfolio_norm": self.max_portfolio_norm,
            "portfolio_integral_quantiles": self.portfolio_integral_quantiles,
        }


def simulate(policy: OptimalPolicy, config: SimConfig) -> SimResult:
    """Simulate kernel and wealth paths under the optimal allocation.

    The kernel step over [t_i, t_{i+1}] uses the exact integrated drift and
    variance, so only the wealth discretization carries time-step error.
    """
    market = policy.market
    n_paths, n_steps = config.n_paths, config.n_steps
    times = np.linspace(0.0, market.horizon, n_steps + 1)

    rate_steps = np.array([market.rate_integral(times[i], times[i + 1]) for i in range(n_steps)])
    var_steps = np.array(
        [market.theta_sq_integral(times[i], times[i + 1]) for i in range(n_steps)]
    )
    vol_steps = np.sqrt(var_steps)
    step_sizes = np.diff(times)
    direction_norms = np.array(
        [float(np.linalg.norm(market.merton_direction(times[i]))) for i in range(n_steps)]
    )

    rng = np.random.default_rng(np.random.Philox(config.seed))
    if config.antithetic:
        half = rng.standard_normal((n_paths // 2, n_steps))
        normals = np.concatenate([half, -half], axis=0)
    else:
        normals = rng.standard_normal((n_paths, n_steps))

    checkpoint_idx = sorted({max(1, round(f * n_steps)) for f in CHECKPOINT_FRACTIONS})
    checkpoint_pos = {idx: pos for pos, idx in enumerate(checkpoint_idx)}

    terminal_kernel = np.empty(n_paths)
    terminal_wealth = np.empty(n_paths)
    terminal_euler = np.empty(n_paths)
    budget_samples = np.empty((len(checkpoint_idx), n_paths))
    integrals = np.empty(n_paths)

    n_chunks = (n_paths + CHUNK_ROWS - 1) // CHUNK_ROWS
    kernel_sum = np.zeros((n_chunks, n_steps + 1))
    kernel_sq = np.zeros((n_chunks, n_steps + 1))
    wealth_sum = np.zeros((n_chunks, n_steps + 1))
    wealth_sq = np.zeros((n_chunks, n_steps + 1))
    chunk_max_norm = np.zeros(n_chunks)

    def run_chunk(c: int):
        lo, hi = c * CHUNK_ROWS, min((c + 1) * CHUNK_ROWS, n_paths)
        z = normals[lo:hi]
        xi = np.ones(hi - lo)
        wealth = np.full(hi - lo, policy.x0)
        kernel_sum[c, 0] = xi.sum()
        kernel_sq[c, 0] = np.square(xi).sum()
        wealth_sum[c, 0] = wealth.sum()
        wealth_sq[c, 0] = np.square(wealth).sum()
        path_integral = np.zeros(hi - lo)
        max_norm = 0.0
        for i in range(n_steps):
            scalar = np.asarray(policy.portfolio_scalar(times[i], xi))
            norms = np.abs(scalar) * direction_norms[i]
            max_norm = max(max_norm, float(norms.max()))
            path_integral += norms**2.5 * step_sizes[i]
            shock = vol_steps[i] * z[:, i]
            wealth = wealth + rate_steps[i] * wealth + scalar * (var_steps[i] + shock)
            xi = xi * np.exp(-rate_steps[i] - 0.5 * var_steps[i] - shock)
            kernel_sum[c, i + 1] = xi.sum()
            kernel_sq[c, i + 1] = np.square(xi).sum()
            wealth_sum[c, i + 1] = wealth.sum()
            wealth_sq[c, i + 1] = np.square(wealth).sum()
            if i + 1 in checkpoint_pos:
                if i + 1 == n_steps:
                    exact = np.asarray(policy.terminal(xi))
                else:
                    exact = np.asarray(policy.wealth(times[i + 1], xi))
                budget_samples[checkpoint_pos[i + 1], lo:hi] = xi * exact
                if i + 1 == n_steps:
                    terminal_wealth[lo:hi] = exact
        terminal_kernel[lo:hi] = xi
        terminal_euler[lo:hi] = wealth
        integrals[lo:hi] = path_integral
        chunk_max_norm[c] = max_norm

    policy.portfolio_scalar(0.0, 1.0)  # build lazy caches before threads share them
    workers = min(_worker_count(), n_chunks)
    if workers <= 1:
        for c in range(n_chunks):
            run_chunk(c)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run_chunk, range(n_chunks)))

    kernel_mean = kernel_sum.sum(axis=0) / n_paths
    kernel_var = np.maximum(kernel_sq.sum(axis=0) / n_paths - kernel_mean**2, 0.0)
    wealth_mean = wealth_sum.sum(axis=0) / n_paths
    wealth_var = np.maximum(wealth_sq.sum(axis=0) / n_paths - wealth_mean**2, 0.0)

    budget_mean = budget_samples.mean(axis=1)
    budget_se = budget_samples.std(axis=1, ddof=1) / math.sqrt(n_paths)

    quantiles = {
        "q50": float(np.quantile(integrals, 0.5)),
        "q90": float(np.quantile(integrals, 0.9)),
        "q99": float(np.quantile(integrals, 0.99)),
        "max": float(integrals.max()),
    }

    return SimResult(
        config=config,
        x0=policy.x0,
        times=times,
        kernel_mean=kernel_mean,
        kernel_std=np.sqrt(kernel_var),
        wealth_mean=wealth_mean,
        wealth_std=np.sqrt(wealth_var),
        terminal_kernel=terminal_kernel,
        terminal_wealth=terminal_wealth,
        terminal_wealth_euler=terminal_euler,
        checkpoint_times=times[np.asarray(checkpoint_idx)],
        checkpoint_budget_mean=budget_mean,
        checkpoint_budget_se=budget_se,
        max_portfolio_norm=float(chunk_max_norm.max()),
        portfolio_integral_quantiles=quantiles,
    )


MARTINGALE_ATOL = 1e-12


def martingale_check(result: SimResult, sigma_level: float = 3.0) -> dict:
    """Deflated-wealth martingale test at the stored checkpoints.

    Each checkpoint passes when |mean(xi_t X_t) - x0| stays within
    ``sigma_level`` standard errors, with a roundoff floor so exact
    deterministic runs (zero standard error) pass.
    """
    floor = MARTINGALE_ATOL * max(1.0, abs(result.x0))
    checkpoints = []
    all_passed = True
    for t, mean, se in zip(
        result.checkpoint_times, result.checkpoint_budget_mean, result.checkpoint_budget_se
    ):
        residual = float(mean - result.x0)
        passed = abs(residual) <= sigma_level * float(se) + floor
        all_passed = all_passed and passed
        checkpoints.append(
            {
                "t": float(t),
                "budget_mean": float(mean),
                "budget_se": float(se),
                "residual": residual,
                "passed": passed,
            }
        )
    return {"x0": result.x0, "sigma_level": sigma_level, "checkpoints": checkpoints, "passed": all_passed}
