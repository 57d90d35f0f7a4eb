"""Market model tests: price of risk, exact integrals, kernel law."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import null_space

from psahara.market import MarketModel


def single_asset_market(horizon=1.0, mu=0.086, sigma=0.1, r=0.03, **kw):
    return MarketModel(horizon=horizon, rate=r, drift=mu, sigma=sigma, **kw)


def test_theta_single_asset():
    market = single_asset_market()
    assert market.theta(0.0) == pytest.approx([0.56], abs=1e-14)
    assert market.theta(0.999) == pytest.approx([0.56], abs=1e-14)
    assert market.merton_direction(0.5) == pytest.approx([5.6], rel=1e-14)


def test_theta_minimum_norm_multi_asset():
    rng = np.random.default_rng(7)
    m, q = 2, 3
    sigma = rng.normal(size=(m, q)) * 0.2
    while np.linalg.matrix_rank(sigma) < m:
        sigma = rng.normal(size=(m, q)) * 0.2
    r = 0.02
    mu = r + np.abs(rng.normal(size=m)) * 0.05 + 0.01
    market = MarketModel(horizon=2.0, rate=r, drift=mu, sigma=sigma)

    theta = market.theta(1.0)
    residual = sigma @ theta - (mu - r)
    assert np.linalg.norm(residual) < 1e-10

    # orthogonal to the kernel of sigma
    kernel = null_space(sigma)
    assert np.max(np.abs(kernel.T @ theta)) < 1e-10

    # equals the least-squares minimum-norm solution
    lstsq_theta, *_ = np.linalg.lstsq(sigma, mu - r, rcond=None)
    np.testing.assert_allclose(theta, lstsq_theta, atol=1e-12)


def test_degenerate_market_needs_flag():
    with pytest.raises(ValueError, match="drift must exceed rate"):
        single_asset_market(mu=0.03)
    market = single_asset_market(mu=0.03, allow_degenerate=True)
    assert market.theta(0.2) == pytest.approx([0.0], abs=1e-15)
    mean, var = market.kernel_log_law(0.0, 1.0)
    assert mean == pytest.approx(-0.03)
    assert var == 0.0


def test_integrals_constant_coefficients():
    market = single_asset_market()
    assert market.theta_sq_integral(0.0, 1.0) == pytest.approx(0.3136, rel=1e-12)
    assert market.rate_integral(0.0, 1.0) == pytest.approx(0.03, rel=1e-12)
    assert market.rate_integral(0.5, 0.5) == 0.0
    assert market.theta_sq_integral(1.0, 1.0) == 0.0


def test_rate_integral_two_cells():
    market = MarketModel(
        horizon=2.0,
        rate=np.array([0.03, 0.05]),
        drift=np.array([[0.08], [0.08]]),
        sigma=np.array([[[0.1]], [[0.1]]]),
    )
    assert market.rate_integral(0.0, 2.0) == pytest.approx(0.08, rel=1e-14)
    # fractional overlap of both cells
    assert market.rate_integral(0.5, 1.5) == pytest.approx(0.5 * 0.03 + 0.5 * 0.05, rel=1e-14)


@settings(max_examples=100, deadline=None)
@given(
    t0=st.floats(0.0, 2.0),
    t1=st.floats(0.0, 2.0),
    t2=st.floats(0.0, 2.0),
)
def test_integral_additivity(t0, t1, t2):
    a, b, c = sorted([t0, t1, t2])
    rng = np.random.default_rng(11)
    n = 17
    market = MarketModel(
        horizon=2.0,
        rate=rng.uniform(0.0, 0.05, size=n),
        drift=rng.uniform(0.06, 0.12, size=(n, 1)),
        sigma=rng.uniform(0.08, 0.3, size=(n, 1, 1)),
    )
    whole = market.theta_sq_integral(a, c)
    parts = market.theta_sq_integral(a, b) + market.theta_sq_integral(b, c)
    assert whole == pytest.approx(parts, abs=1e-12)


def test_kernel_log_law_values():
    market = single_asset_market()
    mean, var = market.kernel_log_law(0.0, 1.0)
    assert var == pytest.approx(0.3136, rel=1e-12)
    assert mean == pytest.approx(-(0.03 + 0.5 * 0.3136), rel=1e-12)  # -0.1868


def test_kernel_is_martingale_after_discounting():
    rng = np.random.default_rng(3)
    n = 9
    market = MarketModel(
        horizon=1.5,
        rate=rng.uniform(0.0, 0.06, size=n),
        drift=rng.uniform(0.07, 0.15, size=(n, 2)),
        sigma=rng.uniform(0.1, 0.4, size=(n, 2, 2)) + np.eye(2) * 0.3,
    )
    mean, var = market.kernel_log_law(0.0, 1.5)
    # lognormal moment identity: E[Z] = exp(mean + var/2) must equal e^{-int r}
    assert mean + 0.5 * var == pytest.approx(-market.rate_integral(0.0, 1.5), abs=1e-12)


def test_kernel_monte_carlo_mean():
    market = single_asset_market()
    mean, var = market.kernel_log_law(0.0, 1.0)
    rng = np.random.default_rng(42)
    draws = np.exp(rng.normal(mean, np.sqrt(var), size=100_000))
    target = np.exp(-market.rate_integral(0.0, 1.0))
    se = draws.std(ddof=1) / np.sqrt(len(draws))
    assert abs(draws.mean() - target) < 3 * se


def test_time_out_of_range():
    market = single_asset_market()
    with pytest.raises(ValueError, match="outside"):
        market.theta(1.5)
    with pytest.raises(ValueError, match="t0 <= t1"):
        market.rate_integral(0.8, 0.2)


def test_dict_roundtrip_and_broadcast():
    market = MarketModel.from_dict(
        {"T": 1.0, "steps_per_year": 12, "r": 0.03, "mu": 0.086, "sigma": 0.1}
    )
    assert market.n_steps == 12
    assert market.n_assets == 1 and market.n_factors == 1
    data = market.to_dict()
    assert data["r"] == 0.03
    assert data["mu"] == [0.086]
    assert data["sigma"] == [[0.1]]
    again = MarketModel.from_dict(data)
    assert again.theta(0.1) == pytest.approx(market.theta(0.1))

    with pytest.raises(ValueError, match="missing"):
        MarketModel.from_dict({"T": 1.0, "r": 0.0, "mu": 0.1})
    with pytest.raises(ValueError, match="unknown market fields"):
        MarketModel.from_dict(
            {"T": 1.0, "r": 0.03, "mu": 0.086, "sigma": 0.1, "vol": 0.2}
        )


def test_positive_definite_required():
    sigma = np.array([[0.1, 0.0], [0.1, 0.0]])  # rank deficient
    with pytest.raises(ValueError, match="positive definite"):
        MarketModel(horizon=1.0, rate=0.01, drift=np.array([0.05, 0.05]), sigma=sigma)
