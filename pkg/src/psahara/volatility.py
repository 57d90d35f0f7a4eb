"""Volatility matrix estimation: historical, implied, and MLE routes.

All three estimators end in an m x q matrix whose row norms are the per-asset
volatilities, ready for MarketModel construction.  The historical route
factors the annualized sample covariance directly; the implied and MLE routes
estimate per-asset norms and spread them over a correlation factor.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

__all__ = [
    "ReturnsPanel",
    "VolEstimate",
    "assemble_sigma",
    "bs_put_price",
    "historical_vol",
    "implied_vol",
    "mle_vol",
    "read_csv_table",
]

FACTOR_TOL = 1e-10
NORM_TOL = 1e-12
IMPLIED_VOL_LO = 1e-6
IMPLIED_VOL_HI = 5.0
PRICE_RESIDUAL_TOL = 1e-10


def read_csv_table(path) -> tuple[tuple[str, ...], np.ndarray, tuple[str, ...]]:
    """Read a `date,asset1,...` table; returns (dates, values, asset names)."""
    with open(path, newline="") as handle:
        rows = list(csv.reader(handle))
    if not rows or not rows[0] or rows[0][0].strip().lower() != "date":
        raise ValueError("expected a header starting with 'date'")
    header = rows[0]
    dates, values = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ValueError(f"row {lineno} has {len(row)} fields, expected {len(header)}")
        dates.append(row[0])
        try:
            values.append([float(cell) for cell in row[1:]])
        except ValueError as exc:
            raise ValueError(f"row {lineno}: {exc}") from exc
    if not values:
        raise ValueError("no observations in file")
    return tuple(dates), np.array(values), tuple(header[1:])


@dataclass(frozen=True)
class ReturnsPanel:
    """Per-asset return observations on a fixed clock.

    ``h`` is the observation spacing in years (1/252 for daily data).
    """

    returns: np.ndarray
    h: float
    dates: tuple[str, ...] = ()

    def __post_init__(self):
        arr = np.asarray(self.returns, dtype=float)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2:
            raise ValueError("returns must be a (n_obs, n_assets) array")
        if not np.all(np.isfinite(arr)):
            raise ValueError("returns must be finite")
        if not self.h > 0:
            raise ValueError("observation spacing h must be positive")
        if self.dates and len(self.dates) != arr.shape[0]:
            raise ValueError("dates length must match the number of observations")
        object.__setattr__(self, "returns", arr)
        object.__setattr__(self, "dates", tuple(self.dates))

    @property
    def n_obs(self) -> int:
        return self.returns.shape[0]

    @property
    def n_assets(self) -> int:
        return self.returns.shape[1]

    def correlation(self) -> np.ndarray:
        """Sample correlation matrix; constant columns make it undefined."""
        if self.n_obs < 2:
            raise ValueError("need at least 2 observations")
        stds = self.returns.std(axis=0, ddof=1)
        if np.any(stds == 0.0):
            raise ValueError("correlation undefined for a constant column")
        corr = np.corrcoef(self.returns, rowvar=False)
        return np.atleast_2d(corr)

    @classmethod
    def from_csv(cls, path, h: float = 1.0 / 252.0) -> "ReturnsPanel":
        """Read `date,asset1,...` rows with decimal returns."""
        dates, values, _ = read_csv_table(path)
        return cls(returns=values, h=h, dates=dates)

    def to_csv(self, path, asset_names=None) -> None:
        names = list(asset_names or (f"asset{i + 1}" for i in range(self.n_assets)))
        dates = self.dates or tuple(str(i) for i in range(self.n_obs))
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["date", *names])
            for date, row in zip(dates, self.returns):
                writer.writerow([date, *(repr(v) for v in row.tolist())])


@dataclass(frozen=True)
class VolEstimate:
    """Volatility matrix with its method tag and per-asset row norms."""

    sigma: np.ndarray
    method: str
    norms: np.ndarray = field(default=None)

    def __post_init__(self):
        sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        if not np.all(np.isfinite(sigma)):
            raise ValueError("sigma must be finite")
        row_norms = np.linalg.norm(sigma, axis=1)
        norms = row_norms if self.norms is None else np.asarray(self.norms, dtype=float)
        if not np.allclose(row_norms, norms, rtol=0.0, atol=NORM_TOL * max(1.0, row_norms.max(initial=0.0))):
            raise ValueError("declared norms do not match sigma row norms")
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "norms", norms)

    @property
    def covariance(self) -> np.ndarray:
        return self.sigma @ self.sigma.T


def _factor_psd(matrix: np.ndarray) -> np.ndarray:
    """Square factor F with FF^T equal to the PSD input.

    Lower-triangular Cholesky when positive definite; otherwise an eigenvalue
    factorization with negative eigenvalues clamped to zero.
    """
    try:
        return np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError:
        eigvals, eigvecs = np.linalg.eigh(matrix)
        return eigvecs * np.sqrt(np.maximum(eigvals, 0.0))


def historical_vol(panel: ReturnsPanel) -> VolEstimate:
    """Factor the annualized sample covariance of the panel."""
    if panel.n_obs < 2:
        raise ValueError("need at least 2 observations")
    cov = np.atleast_2d(np.cov(panel.returns, rowvar=False, ddof=1)) / panel.h
    sigma = _factor_psd(cov)
    residual = np.abs(sigma @ sigma.T - cov).max()
    if not residual < FACTOR_TOL * max(1.0, np.abs(cov).max()):
        raise ValueError(f"covariance factorization residual {residual:.2e}")
    return VolEstimate(sigma=sigma, method="historical")


def bs_put_price(spot: float, strike: float, rate: float, maturity: float, vol: float) -> float:
    """European put under a constant-coefficient lognormal spot."""
    if not (spot > 0 and strike > 0 and maturity > 0 and vol > 0):
        raise ValueError("spot, strike, maturity, and vol must be positive")
    total_sd = vol * math.sqrt(maturity)
    d1 = (math.log(spot / strike) + (rate + 0.5 * vol * vol) * maturity) / total_sd
    d2 = d1 - total_sd
    return strike * math.exp(-rate * maturity) * ndtr(-d2) - spot * ndtr(-d1)


def _put_vega(spot: float, strike: float, rate: float, maturity: float, vol: float) -> float:
    total_sd = vol * math.sqrt(maturity)
    d1 = (math.log(spot / strike) + (rate + 0.5 * vol * vol) * maturity) / total_sd
    return spot * math.sqrt(maturity) * math.exp(-0.5 * d1 * d1) / math.sqrt(2.0 * math.pi)


def implied_vol(price: float, spot: float, strike: float, rate: float, maturity: float) -> float:
    """Volatility solving bs_put_price(...) = price.

    Bisection on [1e-6, 5] followed by a Newton polish; prices implying more
    than 500% annualized volatility are rejected rather than extrapolated.
    """
    if not (spot > 0 and strike > 0 and maturity > 0):
        raise ValueError("spot, strike, and maturity must be positive")
    discounted_strike = strike * math.exp(-rate * maturity)
    lower_bound = max(discounted_strike - spot, 0.0)
    if not (lower_bound < price < discounted_strike):
        raise ValueError(
            f"price {price} outside the no-arbitrage interval ({lower_bound}, {discounted_strike})"
        )
    lo, hi = IMPLIED_VOL_LO, IMPLIED_VOL_HI
    if bs_put_price(spot, strike, rate, maturity, lo) >= price:
        return lo
    if bs_put_price(spot, strike, rate, maturity, hi) < price:
        raise ValueError(f"price {price} implies volatility beyond {IMPLIED_VOL_HI}")
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if bs_put_price(spot, strike, rate, maturity, mid) < price:
            lo = mid
        else:
            hi = mid
    vol = 0.5 * (lo + hi)
    best_vol, best_residual = vol, abs(bs_put_price(spot, strike, rate, maturity, vol) - price)
    for _ in range(8):
        residual = bs_put_price(spot, strike, rate, maturity, vol) - price
        vega = _put_vega(spot, strike, rate, maturity, vol)
        if abs(residual) < 1e-14 or vega <= 0.0:
            break
        vol = min(max(vol - residual / vega, IMPLIED_VOL_LO), IMPLIED_VOL_HI)
        candidate = abs(bs_put_price(spot, strike, rate, maturity, vol) - price)
        if candidate >= best_residual:
            break
        best_vol, best_residual = vol, candidate
    if not best_residual < PRICE_RESIDUAL_TOL:
        raise ValueError(f"implied vol solve stalled, residual {best_residual:.2e}")
    return best_vol


def _repaired_correlation(corr: np.ndarray) -> np.ndarray:
    """Validate a correlation matrix, clamping tiny negative eigenvalues."""
    corr = np.atleast_2d(np.asarray(corr, dtype=float))
    m = corr.shape[0]
    if corr.shape != (m, m):
        raise ValueError("correlation matrix must be square")
    if not np.all(np.isfinite(corr)):
        raise ValueError("correlation matrix must be finite")
    if np.abs(corr - corr.T).max() > 1e-12:
        raise ValueError("correlation matrix must be symmetric")
    if np.abs(np.diag(corr) - 1.0).max() > 1e-12:
        raise ValueError("correlation matrix must have a unit diagonal")
    if np.abs(corr).max() > 1.0 + 1e-12:
        raise ValueError("correlation entries must lie in [-1, 1]")
    eigvals, eigvecs = np.linalg.eigh(corr)
    if eigvals[0] >= 1e-12:
        return corr
    repaired = (eigvecs * np.maximum(eigvals, 0.0)) @ eigvecs.T
    scale = 1.0 / np.sqrt(np.diag(repaired))
    return repaired * scale[:, None] * scale[None, :]


def assemble_sigma(norms, corr) -> VolEstimate:
    """Spread per-asset volatility norms over a correlation factor.

    Rows of the factor of ``corr`` are rescaled so row i has norm norms[i];
    the result has diagonal covariances norms[i]^2 and the given correlations.
    """
    norms = np.asarray(norms, dtype=float)
    if norms.ndim != 1 or norms.size == 0:
        raise ValueError("norms must be a nonempty 1-d array")
    if np.any(norms <= 0.0) or not np.all(np.isfinite(norms)):
        raise ValueError("norms must be positive and finite")
    corr = _repaired_correlation(corr)
    if corr.shape[0] != norms.size:
        raise ValueError("norms length must match the correlation dimension")
    factor = _factor_psd(corr)
    row_norms = np.linalg.norm(factor, axis=1)
    if np.any(row_norms == 0.0):
        raise ValueError("correlation factor has a zero row")
    sigma = factor * (norms / row_norms)[:, None]
    return VolEstimate(sigma=sigma, method="implied")


def mle_vol(panel: ReturnsPanel) -> np.ndarray:
    """Per-asset squared volatility by Gaussian maximum likelihood.

    sigma_i^2 = (1/(n h)) sum_k (p_ik - mean_i)^2 with the per-observation
    mean, the standard estimator for lognormal increments.
    """
    if panel.n_obs < 2:
        raise ValueError("need at least 2 observations")
    centered = panel.returns - panel.returns.mean(axis=0)
    return np.square(centered).sum(axis=0) / (panel.n_obs * panel.h)
