"""Shared fixtures: the five-cell showcase utility, the incentive composition,
reference markets, and the quadrature oracle for time-t wealth."""

from __future__ import annotations

import math
import warnings

import numpy as np
import pytest
from scipy.integrate import IntegrationWarning, quad

from psahara.envelope import RawPiecewiseUtility, concave_envelope
from psahara.market import MarketModel
from psahara.policy import OptimalPolicy, terminal_wealth
from psahara.utility import (
    PiecewiseUtility,
    UtilityPiece,
    compose_with_map,
    incentive_contract,
    sahara_value,
)

# Five-cell raw utility: concave sahara tails, a power-gap cliff, a plateau,
# and a mid sahara piece. Exercises every non-concave feature at once.
FIVE_CELL_BREAKS = (-6.0, -4.5, -1.0, 2.0)


def _five_cell_levels():
    l1, l2, l3, l4 = FIVE_CELL_BREAKS
    u_l1 = 2.0 * sahara_value(l1, 1.7, 1.0, 3.0)
    b1 = u_l1 + 20.0 * (l2 - l1) ** (-0.7)
    # the cliff piece dives to -inf, so the next cell resumes at the last
    # finite level u(l1)
    b2 = u_l1 - 1.5 * sahara_value(l2, 2.2, 1.0, 1.0)
    b3 = 1.5 * sahara_value(l3, 2.2, 1.0, 1.0) + b2
    b4 = b3 - 7.0 * sahara_value(l4, 1.2, 1.0, 6.0)
    return u_l1, b1, b2, b3, b4


@pytest.fixture(scope="session")
def five_cell_raw() -> RawPiecewiseUtility:
    l1, l2, l3, l4 = FIVE_CELL_BREAKS
    _, b1, b2, b3, b4 = _five_cell_levels()
    return RawPiecewiseUtility.from_dict(
        {
            "breakpoints": list(FIVE_CELL_BREAKS),
            "pieces": [
                {"alpha": 1.7, "beta": 1.0, "d": 3.0, "gamma": 2.0, "u": 0.0},
                {
                    "kind": "power_gap",
                    "coef": -20.0,
                    "exponent": -0.7,
                    "anchor": l2,
                    "u": b1,
                },
                {"alpha": 2.2, "beta": 1.0, "d": 1.0, "gamma": 1.5, "u": b2},
                {"kind": "constant", "u": b3},
                {"alpha": 1.2, "beta": 1.0, "d": 6.0, "gamma": 7.0, "u": b4},
            ],
        }
    )


@pytest.fixture(scope="session")
def five_cell_envelope(five_cell_raw):
    return concave_envelope(five_cell_raw)


# Incentive setup: manager paid a base share plus a participation above a
# benchmark, wrapping a single smooth utility.
INCENTIVE_RATE = 0.03
INCENTIVE_PARTICIPATION = 0.2
INCENTIVE_BASE_SHARE = 0.02


def incentive_benchmark(horizon: float = 1.0) -> float:
    return float(np.exp(INCENTIVE_RATE * horizon))


@pytest.fixture(scope="session")
def incentive_composed() -> PiecewiseUtility:
    base = PiecewiseUtility((), (UtilityPiece(alpha=2.0, beta=1.0, d=0.0, gamma=1.0),))
    contract = incentive_contract(
        participation=INCENTIVE_PARTICIPATION,
        base_share=INCENTIVE_BASE_SHARE,
        benchmark=incentive_benchmark(),
    )
    return compose_with_map(base, contract)


@pytest.fixture(scope="session")
def incentive_envelope(incentive_composed):
    return concave_envelope(incentive_composed)


# Single risky asset with a fat risk premium: theta = 0.56.
SHOWCASE_RATE = 0.03
SHOWCASE_DRIFT = 0.086
SHOWCASE_VOL = 0.1


@pytest.fixture(scope="session")
def showcase_market() -> MarketModel:
    return MarketModel(horizon=1.0, rate=SHOWCASE_RATE, drift=SHOWCASE_DRIFT, sigma=SHOWCASE_VOL)


@pytest.fixture(scope="session")
def five_cell_policy(five_cell_envelope, showcase_market) -> OptimalPolicy:
    return OptimalPolicy.solve(five_cell_envelope.utility, showcase_market, 1.0)


@pytest.fixture(scope="session")
def incentive_policy(incentive_envelope, showcase_market) -> OptimalPolicy:
    return OptimalPolicy.solve(incentive_envelope.utility, showcase_market, 1.0)


def quadrature_wealth(utility, market, y: float, t: float, xi: float) -> float:
    """Time-t wealth by adaptive quadrature of the terminal map.

    Integrates E[(xi_T/xi_t) x*(y xi_T)] against the lognormal kernel law,
    splitting at every window boundary so each segment is smooth.  Fully
    independent of the closed-form component formulas.
    """
    rate_int = market.rate_integral(t, market.horizon)
    q = market.theta_sq_integral(t, market.horizon)
    mean = -rate_int - 0.5 * q
    sd = math.sqrt(q)

    cuts = set()
    for slope in list(utility.left_slopes()) + list(utility.right_slopes()):
        if np.isfinite(slope) and slope > 0:
            cuts.add(math.log(slope / (y * xi)))
    edges = [-np.inf] + sorted(cuts) + [np.inf]

    def integrand(n: float) -> float:
        if abs(n) > 600.0:
            return 0.0
        x = terminal_wealth(y * xi * math.exp(n), utility)
        if x == 0.0:
            return 0.0
        # log space: the tail has exp(n)*x overflowing against a zero density
        z = (n - mean) / sd
        magnitude = n + math.log(abs(x)) - 0.5 * z * z - math.log(sd * math.sqrt(2.0 * math.pi))
        if magnitude < -700.0:
            return 0.0
        return math.copysign(math.exp(magnitude), x)

    total = 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IntegrationWarning)
        for a, b in zip(edges[:-1], edges[1:]):
            val, _ = quad(integrand, a, b, limit=200, epsabs=1e-13, epsrel=1e-11)
            total += val
    return total
