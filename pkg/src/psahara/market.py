"""Multi-asset Black-Scholes market with deterministic piecewise-constant coefficients.

Coefficients live on a uniform time grid over [0, horizon].  Every closed
form downstream consumes only the market price of risk and the two time
integrals below, which are exact for step functions (including fractional
overlap at the interval ends).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

__all__ = ["MarketModel"]


def _time_axis(value, n_steps: int) -> np.ndarray:
    """Broadcast a scalar or per-step sequence to shape (n_steps, ...)."""
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.broadcast_to(arr, (n_steps,)).copy()
    return arr


@dataclass(frozen=True)
class MarketModel:
    """Market coefficients on a uniform grid of ``n_steps`` cells.

    Parameters
    ----------
    horizon : float
        Terminal time in years.
    rate : float or (n,) array
        Risk-free short rate per cell.
    drift : float, (m,) or (n, m) array
        Risky asset drifts per cell.
    sigma : float, (m, q) or (n, m, q) array
        Volatility loadings per cell; ``sigma @ sigma.T`` must be positive
        definite cell by cell.
    steps_per_year : int
        Grid resolution used when every coefficient is constant.
    allow_degenerate : bool
        Permit ``drift == rate`` (zero market price of risk).  Off by
        default: the optimal policy formulas assume a strictly positive
        excess return.
    """

    horizon: float
    rate: np.ndarray
    drift: np.ndarray
    sigma: np.ndarray
    steps_per_year: int = 252
    allow_degenerate: bool = False

    def __post_init__(self):
        horizon = float(self.horizon)
        sigma = np.asarray(self.sigma, dtype=float)
        if sigma.ndim == 0:
            sigma = sigma.reshape(1, 1)
        if sigma.ndim == 2:
            sigma = sigma[None, :, :]
        drift = np.asarray(self.drift, dtype=float)
        if drift.ndim == 0:
            drift = drift.reshape(1)
        if drift.ndim == 1:
            drift = drift[None, :]
        rate = np.asarray(self.rate, dtype=float)
        if rate.ndim == 0:
            rate = rate.reshape(1)

        n_steps = max(len(rate), len(drift), len(sigma))
        if n_steps == 1:
            n_steps = max(1, round(horizon * self.steps_per_year))
        rate = np.ascontiguousarray(np.broadcast_to(rate, (n_steps,)) if len(rate) in (1, n_steps) else rate)
        drift = np.ascontiguousarray(
            np.broadcast_to(drift, (n_steps,) + drift.shape[1:]) if len(drift) in (1, n_steps) else drift
        )
        sigma = np.ascontiguousarray(
            np.broadcast_to(sigma, (n_steps,) + sigma.shape[1:]) if len(sigma) in (1, n_steps) else sigma
        )

        object.__setattr__(self, "horizon", horizon)
        object.__setattr__(self, "rate", rate)
        object.__setattr__(self, "drift", drift)
        object.__setattr__(self, "sigma", sigma)

        errors = self.validate()
        if errors:
            raise ValueError("invalid market: " + "; ".join(errors))

    # --- shape accessors -------------------------------------------------
    @property
    def n_steps(self) -> int:
        return len(self.rate)

    @property
    def n_assets(self) -> int:
        return self.sigma.shape[1]

    @property
    def n_factors(self) -> int:
        return self.sigma.shape[2]

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    def validate(self) -> list[str]:
        errors = []
        if not (math.isfinite(self.horizon) and self.horizon > 0):
            errors.append("horizon must be positive and finite")
            return errors
        if self.rate.shape != (self.n_steps,):
            errors.append(f"rate has shape {self.rate.shape}, expected ({self.n_steps},)")
        if self.drift.shape != (self.n_steps, self.n_assets):
            errors.append(
                f"drift has shape {self.drift.shape}, expected ({self.n_steps}, {self.n_assets})"
            )
        if self.sigma.ndim != 3 or self.sigma.shape[0] != self.n_steps:
            errors.append(f"sigma has shape {self.sigma.shape}, expected 3-D with {self.n_steps} cells")
        if errors:
            return errors
        if self.n_factors < self.n_assets:
            errors.append("need at least as many driving factors as assets")
        for arr, name in ((self.rate, "rate"), (self.drift, "drift"), (self.sigma, "sigma")):
            if not np.all(np.isfinite(arr)):
                errors.append(f"{name} contains non-finite entries")
                return errors
        gram = self.sigma @ np.swapaxes(self.sigma, 1, 2)
        for k in range(self.n_steps):
            try:
                np.linalg.cholesky(gram[k])
            except np.linalg.LinAlgError:
                errors.append(f"sigma*sigma^T is not positive definite at cell {k}")
                break
        if not self.allow_degenerate:
            excess = self.drift - self.rate[:, None]
            if not np.all(excess > 0):
                k, i = np.argwhere(~(excess > 0))[0]
                errors.append(
                    f"drift must exceed rate (asset {i}, cell {k}); "
                    "pass allow_degenerate=True to permit zero excess return"
                )
        return errors

    # --- coefficients along the grid --------------------------------------
    @cached_property
    def _theta_path(self) -> np.ndarray:
        """Minimum-norm market price of risk per cell, shape (n, q)."""
        gram = self.sigma @ np.swapaxes(self.sigma, 1, 2)
        excess = self.drift - self.rate[:, None]
        lam = np.linalg.solve(gram, excess[:, :, None])
        return np.squeeze(np.swapaxes(self.sigma, 1, 2) @ lam, axis=2)

    @cached_property
    def _theta_norm_sq(self) -> np.ndarray:
        return np.einsum("kq,kq->k", self._theta_path, self._theta_path)

    @cached_property
    def _merton_path(self) -> np.ndarray:
        """(sigma sigma^T)^{-1} (mu - r 1) per cell, shape (n, m)."""
        gram = self.sigma @ np.swapaxes(self.sigma, 1, 2)
        excess = self.drift - self.rate[:, None]
        return np.linalg.solve(gram, excess[:, :, None])[:, :, 0]

    def _cell_index(self, t: float) -> int:
        if not 0.0 <= t <= self.horizon + 1e-12:
            raise ValueError(f"time {t} outside [0, {self.horizon}]")
        return min(int(t / self.dt), self.n_steps - 1)

    def theta(self, t: float) -> np.ndarray:
        """Market price of risk at time t (minimum-norm solution)."""
        return self._theta_path[self._cell_index(t)].copy()

    def merton_direction(self, t: float) -> np.ndarray:
        """Direction (sigma sigma^T)^{-1}(mu - r 1) scaling every policy term."""
        return self._merton_path[self._cell_index(t)].copy()

    def rate_at(self, t: float) -> float:
        return float(self.rate[self._cell_index(t)])

    def drift_at(self, t: float) -> np.ndarray:
        return self.drift[self._cell_index(t)].copy()

    def sigma_at(self, t: float) -> np.ndarray:
        return self.sigma[self._cell_index(t)].copy()

    def _cell_weights(self, t0: float, t1: float) -> np.ndarray:
        if t1 < t0:
            raise ValueError(f"need t0 <= t1, got [{t0}, {t1}]")
        edges = np.linspace(0.0, self.horizon, self.n_steps + 1)
        lo = np.maximum(edges[:-1], t0)
        hi = np.minimum(edges[1:], t1)
        return np.maximum(hi - lo, 0.0)

    def rate_integral(self, t0: float, t1: float) -> float:
        """Exact integral of r over [t0, t1]."""
        return float(self._cell_weights(t0, t1) @ self.rate)

    def theta_sq_integral(self, t0: float, t1: float) -> float:
        """Exact integral of the squared market price of risk over [t0, t1]."""
        return float(self._cell_weights(t0, t1) @ self._theta_norm_sq)

    def kernel_log_law(self, t0: float, t1: float) -> tuple[float, float]:
        """Mean and variance of log(xi_t1 / xi_t0); the ratio is lognormal
        and independent of xi_t0."""
        q = self.theta_sq_integral(t0, t1)
        return -(self.rate_integral(t0, t1) + 0.5 * q), q

    # --- serialization -----------------------------------------------------
    def to_dict(self) -> dict:
        def collapse(arr):
            first = arr[0]
            if np.all(arr == first):
                return first.tolist() if getattr(first, "ndim", 0) else float(first)
            return arr.tolist()

        return {
            "T": self.horizon,
            "steps_per_year": self.steps_per_year,
            "r": collapse(self.rate),
            "mu": collapse(self.drift),
            "sigma": collapse(self.sigma),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MarketModel":
        if not isinstance(data, dict):
            raise ValueError("market document must be a JSON object")
        missing = {"T", "r", "mu", "sigma"} - set(data)
        if missing:
            raise ValueError(f"market document is missing fields: {sorted(missing)}")
        unknown = set(data) - {"T", "steps_per_year", "r", "mu", "sigma", "allow_degenerate"}
        if unknown:
            raise ValueError(f"unknown market fields: {sorted(unknown)}")
        return cls(
            horizon=float(data["T"]),
            rate=np.asarray(data["r"], dtype=float),
            drift=np.asarray(data["mu"], dtype=float),
            sigma=np.asarray(data["sigma"], dtype=float),
            steps_per_year=int(data.get("steps_per_year", 252)),
            allow_degenerate=bool(data.get("allow_degenerate", False)),
        )
