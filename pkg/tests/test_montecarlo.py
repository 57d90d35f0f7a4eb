"""Simulation invariants: budget recovery, step-error order, determinism."""

from __future__ import annotations

import dataclasses
import math

import numpy as np
import pytest

from psahara.market import MarketModel
from psahara.montecarlo import SimConfig, SimResult, martingale_check, simulate
from psahara.policy import OptimalPolicy
from psahara.utility import PiecewiseUtility, UtilityPiece


def single_piece(alpha=2.0, beta=1.0, d=0.0, gamma=1.0) -> PiecewiseUtility:
    return PiecewiseUtility((), (UtilityPiece(alpha=alpha, beta=beta, d=d, gamma=gamma),))


# checkpoint residuals depend only on the exact kernel law and the closed-form
# wealth map, so the statistical tests run few steps to keep the suite fast
@pytest.fixture(scope="module")
def big_sim(five_cell_policy) -> SimResult:
    return simulate(five_cell_policy, SimConfig(n_paths=100_000, n_steps=16, seed=42))


# ------------------------------------------------------------- configuration


def test_config_rejects_bad_sizes():
    with pytest.raises(ValueError):
        SimConfig(n_paths=1, n_steps=10)
    with pytest.raises(ValueError):
        SimConfig(n_paths=100, n_steps=0)
    with pytest.raises(ValueError):
        SimConfig(n_paths=101, n_steps=10, antithetic=True)


def test_result_shapes(big_sim):
    n_paths, n_steps = big_sim.config.n_paths, big_sim.config.n_steps
    assert big_sim.terminal_kernel.shape == (n_paths,)
    assert big_sim.terminal_wealth.shape == (n_paths,)
    assert big_sim.terminal_wealth_euler.shape == (n_paths,)
    assert big_sim.times.shape == (n_steps + 1,)
    assert big_sim.kernel_mean.shape == (n_steps + 1,)
    assert big_sim.wealth_std.shape == (n_steps + 1,)
    np.testing.assert_allclose(big_sim.checkpoint_times, [0.25, 0.5, 0.75, 1.0])
    assert set(big_sim.portfolio_integral_quantiles) == {"q50", "q90", "q99", "max"}
    assert big_sim.max_portfolio_norm > 0.0


# ------------------------------------------------------- deterministic market


def test_zero_risk_premium_paths_are_deterministic():
    market = MarketModel(
        horizon=1.0, rate=0.03, drift=0.03, sigma=0.2, allow_degenerate=True
    )
    policy = OptimalPolicy.solve(single_piece(), market, 0.5)
    result = simulate(policy, SimConfig(n_paths=16, n_steps=8, seed=0))
    growth = math.exp(market.rate_integral(0.0, 1.0))
    np.testing.assert_allclose(result.terminal_kernel, 1.0 / growth, rtol=1e-14)
    np.testing.assert_allclose(result.terminal_wealth, 0.5 * growth, rtol=1e-12)
    assert result.max_portfolio_norm == 0.0
    assert result.portfolio_integral_quantiles["max"] == 0.0
    report = martingale_check(result)
    assert report["passed"]
    assert all(abs(c["residual"]) < 1e-12 for c in report["checkpoints"])


# ------------------------------------------------------------ martingale law


def test_budget_recovered_within_three_se(big_sim):
    report = martingale_check(big_sim)
    assert report["passed"], report
    for checkpoint in report["checkpoints"]:
        assert abs(checkpoint["residual"]) <= 3.0 * checkpoint["budget_se"] + 1e-12


def test_scaled_multiplier_fails_budget_at_horizon(five_cell_policy):
    skewed = OptimalPolicy.from_multiplier(
        five_cell_policy.utility, five_cell_policy.market, five_cell_policy.y_star * 1.1
    )
    result = simulate(skewed, SimConfig(n_paths=50_000, n_steps=16, seed=11))
    doctored = dataclasses.replace(result, x0=five_cell_policy.x0)
    report = martingale_check(doctored)
    assert not report["passed"]
    assert not report["checkpoints"][-1]["passed"]


def test_kernel_log_moments_match_law(big_sim, showcase_market):
    mean, var = showcase_market.kernel_log_law(0.0, 1.0)
    samples = np.log(big_sim.terminal_kernel)
    n = samples.size
    se_mean = math.sqrt(var / n)
    assert abs(samples.mean() - mean) <= 3.0 * se_mean
    sample_var = samples.var(ddof=1)
    se_var = var * math.sqrt(2.0 / (n - 1))
    assert abs(sample_var - var) <= 3.0 * se_var


# ----------------------------------------------------------- replication gap


def test_replication_gap_shrinks_at_order_half(five_cell_policy):
    steps = (126, 252, 504)
    gaps = []
    for n_steps in steps:
        result = simulate(five_cell_policy, SimConfig(n_paths=4_000, n_steps=n_steps, seed=7))
        gaps.append(result.replication_gap)
    assert gaps[0] > gaps[1] > gaps[2]
    log_h = np.log([1.0 / s for s in steps])
    slope = np.polyfit(log_h, np.log(gaps), 1)[0]
    assert 0.35 <= slope <= 0.65


# -------------------------------------------------------- variance reduction


def test_antithetic_pairs_cut_estimator_variance(showcase_market):
    policy = OptimalPolicy.solve(single_piece(), showcase_market, 1.0)
    config = SimConfig(n_paths=40_000, n_steps=16, seed=3)
    plain = simulate(policy, config)
    paired = simulate(policy, dataclasses.replace(config, antithetic=True))
    f_plain = plain.terminal_kernel * plain.terminal_wealth
    f_paired = paired.terminal_kernel * paired.terminal_wealth
    half = config.n_paths // 2
    pair_means = 0.5 * (f_paired[:half] + f_paired[half:])
    ratio = 2.0 * pair_means.var(ddof=1) / f_plain.var(ddof=1)
    assert ratio < 0.75


def test_antithetic_rows_mirror_kernel_draws(five_cell_policy):
    result = simulate(five_cell_policy, SimConfig(n_paths=64, n_steps=8, seed=5, antithetic=True))
    logs = np.log(result.terminal_kernel)
    drift = logs[:32] + logs[32:]
    # shocks cancel pairwise, leaving twice the deterministic drift
    np.testing.assert_allclose(drift, drift[0], rtol=1e-12)


# ---------------------------------------------------------------- determinism


def _all_arrays_equal(a: SimResult, b: SimResult) -> bool:
    for name in (
        "times",
        "kernel_mean",
        "kernel_std",
        "wealth_mean",
        "wealth_std",
        "terminal_kernel",
        "terminal_wealth",
        "terminal_wealth_euler",
        "checkpoint_budget_mean",
        "checkpoint_budget_se",
    ):
        if not np.array_equal(getattr(a, name), getattr(b, name)):
            return False
    return a.max_portfolio_norm == b.max_portfolio_norm


def test_same_seed_is_bit_identical(five_cell_policy):
    config = SimConfig(n_paths=500, n_steps=32, seed=9)
    assert _all_arrays_equal(simulate(five_cell_policy, config), simulate(five_cell_policy, config))


def test_seed_changes_samples(five_cell_policy):
    a = simulate(five_cell_policy, SimConfig(n_paths=500, n_steps=32, seed=9))
    b = simulate(five_cell_policy, SimConfig(n_paths=500, n_steps=32, seed=10))
    assert not np.array_equal(a.terminal_kernel, b.terminal_kernel)


def test_thread_count_does_not_change_results(five_cell_policy, monkeypatch):
    config = SimConfig(n_paths=9_000, n_steps=16, seed=13)
    monkeypatch.setenv("PSAHARA_THREADS", "1")
    serial = simulate(five_cell_policy, config)
    monkeypatch.setenv("PSAHARA_THREADS", "4")
    threaded = simulate(five_cell_policy, config)
    assert _all_arrays_equal(serial, threaded)


def test_bad_thread_env_raises(five_cell_policy, monkeypatch):
    monkeypatch.setenv("PSAHARA_THREADS", "many")
    with pytest.raises(ValueError):
        simulate(five_cell_policy, SimConfig(n_paths=4, n_steps=2, seed=0))


# -------------------------------------------------------------------- report


def test_summary_is_json_ready(big_sim):
    import json

    payload = json.dumps(big_sim.summary())
    assert "checkpoints" in payload
    report = martingale_check(big_sim)
    assert json.dumps(report)
