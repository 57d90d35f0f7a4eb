"""Volatility estimators against quadrature and generative oracles."""

from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.integrate import quad

from psahara.volatility import (
    ReturnsPanel,
    VolEstimate,
    assemble_sigma,
    bs_put_price,
    historical_vol,
    implied_vol,
    mle_vol,
)


def put_quadrature(spot, strike, rate, maturity, vol):
    """Discounted lognormal expectation of the put payoff."""
    drift = (rate - 0.5 * vol * vol) * maturity
    sd = vol * math.sqrt(maturity)
    z_star = (math.log(strike / spot) - drift) / sd

    def integrand(z):
        terminal = spot * math.exp(drift + sd * z)
        return (strike - terminal) * math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)

    value, _ = quad(integrand, -40.0, z_star, limit=200, epsabs=1e-12, epsrel=1e-12)
    return math.exp(-rate * maturity) * value


# ------------------------------------------------------------ historical vol


def test_unit_covariance_panel_gives_identity_sigma():
    c = math.sqrt(1.5)
    returns = np.array([[c, 0.0], [-c, 0.0], [0.0, c], [0.0, -c]])
    estimate = historical_vol(ReturnsPanel(returns=returns, h=1.0))
    np.testing.assert_allclose(estimate.sigma, np.eye(2), atol=1e-14)
    np.testing.assert_allclose(estimate.norms, [1.0, 1.0], atol=1e-14)


def test_constant_column_gives_zero_row():
    returns = np.column_stack([np.full(10, 0.01), np.linspace(-0.02, 0.02, 10)])
    estimate = historical_vol(ReturnsPanel(returns=returns, h=1.0 / 252.0))
    assert np.all(np.abs(estimate.sigma[0]) < 1e-12)
    assert estimate.norms[0] < 1e-12
    assert estimate.norms[1] > 0.0


def test_generative_covariance_roundtrip():
    sigma0 = np.array([[0.2, 0.0], [0.06, 0.15]])
    true_cov = sigma0 @ sigma0.T
    h = 1.0 / 252.0
    n = 100_000
    rng = np.random.default_rng(21)
    returns = rng.standard_normal((n, 2)) @ (sigma0.T * math.sqrt(h))
    estimate = historical_vol(ReturnsPanel(returns=returns, h=h))
    recovered = estimate.covariance
    for i in range(2):
        for j in range(2):
            se = math.sqrt((true_cov[i, i] * true_cov[j, j] + true_cov[i, j] ** 2) / (n - 1))
            assert abs(recovered[i, j] - true_cov[i, j]) <= 3.0 * se


def test_factorization_residual_bound():
    rng = np.random.default_rng(3)
    returns = rng.standard_normal((300, 4)) * 0.01
    estimate = historical_vol(ReturnsPanel(returns=returns, h=1.0 / 252.0))
    cov = np.cov(returns, rowvar=False, ddof=1) * 252.0
    assert np.abs(estimate.covariance - cov).max() < 1e-10


def test_historical_needs_two_rows():
    with pytest.raises(ValueError):
        historical_vol(ReturnsPanel(returns=np.array([[0.01, 0.02]]), h=1.0))


# ------------------------------------------------------------------- BS put


def test_put_matches_quadrature():
    cases = [
        (100.0, 100.0, 0.0, 1.0, 0.2),
        (100.0, 90.0, 0.03, 0.5, 0.35),
        (50.0, 80.0, 0.01, 2.0, 0.15),
    ]
    for spot, strike, rate, maturity, vol in cases:
        want = put_quadrature(spot, strike, rate, maturity, vol)
        assert bs_put_price(spot, strike, rate, maturity, vol) == pytest.approx(want, rel=1e-6)


def test_atm_reference_value():
    # frozen from the quadrature oracle
    assert bs_put_price(100.0, 100.0, 0.0, 1.0, 0.2) == pytest.approx(7.9655674554, abs=1e-7)


def test_vanishing_vol_out_of_the_money():
    assert bs_put_price(100.0, 90.0, 0.05, 1.0, 1e-8) == 0.0


def test_deep_in_the_money_parity_limit():
    spot, rate, maturity = 100.0, 0.02, 1.0
    strike = 1e7
    want = strike * math.exp(-rate * maturity) - spot
    assert bs_put_price(spot, strike, rate, maturity, 0.2) == pytest.approx(want, rel=1e-12)


def test_put_price_increases_with_vol():
    vols = np.linspace(0.05, 1.5, 40)
    prices = [bs_put_price(100.0, 105.0, 0.02, 0.7, v) for v in vols]
    assert np.all(np.diff(prices) > 0.0)


def test_put_rejects_nonpositive_inputs():
    for args in [(-1, 100, 0.0, 1, 0.2), (100, 0, 0.0, 1, 0.2), (100, 100, 0.0, 0, 0.2), (100, 100, 0.0, 1, 0)]:
        with pytest.raises(ValueError):
            bs_put_price(*args)


# --------------------------------------------------------------- implied vol


def test_implied_vol_roundtrip():
    cases = [
        (100.0, 100.0, 0.0, 1.0, 0.2),
        (100.0, 80.0, 0.05, 0.25, 0.6),
        (120.0, 140.0, 0.01, 2.0, 0.12),
    ]
    for spot, strike, rate, maturity, vol in cases:
        price = bs_put_price(spot, strike, rate, maturity, vol)
        assert implied_vol(price, spot, strike, rate, maturity) == pytest.approx(vol, abs=1e-8)


def test_price_near_intrinsic_returns_small_vol():
    spot, rate, maturity = 100.0, 0.0, 1.0
    vol = implied_vol(1.0 + 1e-12, spot, 101.0, rate, maturity)
    assert 0.0 < vol < 0.01
    # deeper in the money the time value dies faster in vol, still no divergence
    vol_deep = implied_vol(50.0 + 1e-12, spot, 150.0, rate, maturity)
    assert 0.0 < vol_deep < 0.1


def test_implied_vol_bound_errors():
    with pytest.raises(ValueError):
        implied_vol(0.0, 100.0, 90.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        implied_vol(49.0, 100.0, 150.0, 0.0, 1.0)  # below intrinsic value
    with pytest.raises(ValueError):
        implied_vol(151.0, 100.0, 150.0, 0.0, 1.0)  # above discounted strike


def test_implied_vol_rejects_beyond_ceiling():
    spot, strike, rate, maturity = 100.0, 100.0, 0.0, 1.0
    price = strike - 1e-9  # nearly the upper bound, needs vol above 5
    with pytest.raises(ValueError):
        implied_vol(price, spot, strike, rate, maturity)


def test_smile_average_matches_hand_mean():
    spot, rate, maturity = 100.0, 0.02, 1.0
    strikes = [80.0, 90.0, 100.0, 110.0, 120.0]
    smile = [0.28, 0.24, 0.21, 0.205, 0.215]
    implied = [
        implied_vol(bs_put_price(spot, k, rate, maturity, v), spot, k, rate, maturity)
        for k, v in zip(strikes, smile)
    ]
    assert np.mean(implied) == pytest.approx(np.mean(smile), abs=1e-8)


# ------------------------------------------------------------ assemble sigma


def test_identity_correlation_gives_diagonal():
    estimate = assemble_sigma([0.3, 0.1], np.eye(2))
    np.testing.assert_allclose(estimate.sigma, np.diag([0.3, 0.1]), atol=1e-14)


def test_perfect_correlation_gives_proportional_rows():
    estimate = assemble_sigma([0.2, 0.4], np.ones((2, 2)))
    s0, s1 = estimate.sigma
    assert abs(s0[0] * s1[1] - s0[1] * s1[0]) < 1e-14
    np.testing.assert_allclose(estimate.norms, [0.2, 0.4], atol=1e-14)


def test_random_correlation_reconstruction():
    rng = np.random.default_rng(8)
    raw = rng.standard_normal((5, 5))
    cov = raw @ raw.T + 0.5 * np.eye(5)
    scale = 1.0 / np.sqrt(np.diag(cov))
    corr = cov * scale[:, None] * scale[None, :]
    corr = 0.5 * (corr + corr.T)
    np.fill_diagonal(corr, 1.0)
    norms = rng.uniform(0.1, 0.5, 5)
    estimate = assemble_sigma(norms, corr)
    produced = estimate.covariance
    np.testing.assert_allclose(np.sqrt(np.diag(produced)), norms, atol=1e-12)
    back = produced / np.outer(norms, norms)
    np.testing.assert_allclose(back, corr, atol=1e-10)


def test_near_singular_correlation_is_repaired():
    corr = np.ones((3, 3))
    corr[0, 1] = corr[1, 0] = 1.0 - 1e-15
    estimate = assemble_sigma([0.2, 0.2, 0.2], corr)
    back = estimate.covariance / 0.04
    np.testing.assert_allclose(back, corr, atol=1e-10)


def test_assemble_rejects_bad_correlation():
    with pytest.raises(ValueError):
        assemble_sigma([0.2, 0.2], np.array([[1.0, 0.5], [0.4, 1.0]]))
    with pytest.raises(ValueError):
        assemble_sigma([0.2, 0.2], np.array([[1.0, 0.5], [0.5, 0.9]]))
    with pytest.raises(ValueError):
        assemble_sigma([0.2, -0.1], np.eye(2))
    with pytest.raises(ValueError):
        assemble_sigma([0.2, 0.2, 0.2], np.eye(2))


# ------------------------------------------------------------------ MLE vol


def test_mle_constant_returns_zero():
    panel = ReturnsPanel(returns=np.full((10, 2), 0.004), h=1.0 / 252.0)
    np.testing.assert_allclose(mle_vol(panel), [0.0, 0.0], atol=1e-18)


def test_mle_two_point_hand_value():
    c = 0.05
    panel = ReturnsPanel(returns=np.array([[c], [-c]]), h=1.0)
    assert mle_vol(panel)[0] == pytest.approx(c * c, rel=1e-12)


def test_mle_recovers_generative_variance():
    true_var = 0.04
    n, h = 8 * 252, 1.0 / 252.0
    rng = np.random.default_rng(15)
    log_returns = rng.normal(0.06 * h, math.sqrt(true_var * h), size=(n, 1))
    estimate = mle_vol(ReturnsPanel(returns=log_returns, h=h))[0]
    se = true_var * math.sqrt(2.0 / n)
    assert abs(estimate - true_var) <= 3.0 * se


def test_mle_needs_two_rows():
    with pytest.raises(ValueError):
        mle_vol(ReturnsPanel(returns=np.array([[0.01]]), h=1.0))


# ------------------------------------------------------------------- panel IO


def test_csv_roundtrip(tmp_path):
    panel = ReturnsPanel(
        returns=np.array([[0.01, -0.02], [0.005, 0.015], [-0.002, 0.0]]),
        h=1.0 / 252.0,
        dates=("2024-01-02", "2024-01-03", "2024-01-04"),
    )
    path = tmp_path / "panel.csv"
    panel.to_csv(path, asset_names=["aaa", "bbb"])
    loaded = ReturnsPanel.from_csv(path, h=panel.h)
    np.testing.assert_array_equal(loaded.returns, panel.returns)
    assert loaded.dates == panel.dates
    assert path.read_text().splitlines()[0] == "date,aaa,bbb"


def test_csv_rejects_missing_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("time,a\n1,0.01\n")
    with pytest.raises(ValueError):
        ReturnsPanel.from_csv(path)


def test_csv_rejects_ragged_rows(tmp_path):
    path = tmp_path / "ragged.csv"
    path.write_text("date,a,b\n2024-01-02,0.01\n")
    with pytest.raises(ValueError):
        ReturnsPanel.from_csv(path)


def test_panel_correlation_matches_numpy():
    rng = np.random.default_rng(4)
    returns = rng.standard_normal((50, 3)) * 0.01
    panel = ReturnsPanel(returns=returns, h=1.0 / 252.0)
    np.testing.assert_allclose(panel.correlation(), np.corrcoef(returns, rowvar=False))


def test_estimate_rejects_mismatched_norms():
    with pytest.raises(ValueError):
        VolEstimate(sigma=np.eye(2), method="manual", norms=np.array([1.0, 2.0]))
