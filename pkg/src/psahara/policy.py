"""Closed-form optimal wealth and portfolio for a concave piecewise utility.

Everything here keys off the utility's slope chain.  Piece ``k`` is active
when the multiplier-scaled kernel lands in its marginal range, each kink
contributes a wealth atom at its breakpoint, and linear (bridge) pieces have
empty ranges so they carry no interior mass.  Wealth splits into four
component families and the portfolio into four matching terms; both are
evaluated in log space so extreme kernels degrade to exact sentinels instead
of overflowing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.special import ndtr

from psahara.market import MarketModel
from psahara.utility import EXP_CLAMP, KINK_REL_TOL, PiecewiseUtility, UtilityPiece

__all__ = [
    "OptimalPolicy",
    "PortfolioTerms",
    "WealthComponents",
    "g0",
    "g1",
    "g2",
    "incentive_portfolio",
    "solve_multiplier",
    "terminal_wealth",
]

SQRT_TWO_PI = math.sqrt(2.0 * math.pi)

# Phi differences this far below zero are roundoff, not signal.
NEGATIVE_MASS_TOL = -1e-16

BUDGET_TOL = 1e-8


def _phi(g):
    return ndtr(g)


def _phi_density(g):
    with np.errstate(over="ignore"):
        out = np.exp(-0.5 * np.square(g)) / SQRT_TWO_PI
    return out


def _clamp_mass(delta):
    """Zero out tiny negative Phi differences; larger ones poison the result."""
    return np.where(delta >= NEGATIVE_MASS_TOL, np.maximum(delta, 0.0), np.nan)


def _variance_window(market: MarketModel, t: float, end: float) -> tuple[float, float]:
    if end > market.horizon + 1e-12:
        raise ValueError(f"end {end} beyond market horizon {market.horizon}")
    if t >= end:
        raise ValueError(f"need t < end, got t={t}, end={end}")
    return market.rate_integral(t, end), market.theta_sq_integral(t, end)


def g0(z, t: float, end: float, market: MarketModel):
    """Normalized kernel quantile -(log z + int(r - ||theta||^2/2))/sqrt(Q).

    Sentinels: z = +inf -> -inf and z -> 0+ -> +inf, so that Phi(g0) spans
    [0, 1] across a piece's marginal range.
    """
    rate_int, q = _variance_window(market, t, end)
    if q <= 0.0:
        raise ValueError("zero kernel variance on [t, end]; the law is degenerate")
    with np.errstate(divide="ignore"):
        logz = np.log(z)
    return -(logz + rate_int - 0.5 * q) / math.sqrt(q)


def g1(z, t: float, end: float, market: MarketModel, alpha: float):
    """g0 shifted down by sqrt(Q)/alpha (growth-leg tilt)."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    _, q = _variance_window(market, t, end)
    return g0(z, t, end, market) - math.sqrt(q) / alpha


def g2(z, t: float, end: float, market: MarketModel, alpha: float):
    """g0 shifted up by sqrt(Q)/alpha (hedge-leg tilt)."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    _, q = _variance_window(market, t, end)
    return g0(z, t, end, market) + math.sqrt(q) / alpha


@dataclass(frozen=True)
class _SlopeChain:
    """Marginal ranges of a concave piecewise utility, in log space.

    At a breakpoint with no kink the two one-sided marginals agree only up
    to roundoff, which would leave sliver windows with Phi masses of either
    sign.  Such boundaries are snapped to one shared value (the exact stored
    slope when a linear piece adjoins) so the ranges tile bitwise and atoms
    exist only at true kinks.
    """

    breakpoints: np.ndarray  # (n,)
    left: np.ndarray  # marginal just left of each breakpoint (n,)
    right: np.ndarray  # marginal just right of each breakpoint (n,)
    log_left: np.ndarray
    log_right: np.ndarray
    log_hi: np.ndarray  # upper end of each piece's range (n+1,)
    log_lo: np.ndarray  # lower end of each piece's range (n+1,)

    @classmethod
    def from_utility(cls, utility: PiecewiseUtility) -> "_SlopeChain":
        n = len(utility.breakpoints)
        left = np.asarray(utility.left_slopes(), dtype=float).copy()
        right = np.asarray(utility.right_slopes(), dtype=float).copy()
        for i in range(n):
            if left[i] - right[i] > KINK_REL_TOL * left[i]:
                continue  # true kink, keep the gap
            if utility.pieces[i + 1].is_affine:
                common = right[i]
            else:
                common = left[i] if utility.pieces[i].is_affine else right[i]
            left[i] = right[i] = common
        desc = np.empty(2 * n)
        desc[0::2] = left
        desc[1::2] = right
        assert np.all(np.diff(desc) <= 0), "slope chain must be non-increasing"
        with np.errstate(divide="ignore"):
            log_left = np.log(left)
            log_right = np.log(right)
            log_hi = np.empty(n + 1)
            log_lo = np.empty(n + 1)
            log_hi[0] = np.log(utility.marginal_sup())
            log_hi[1:] = log_right
            log_lo[n] = np.log(utility.marginal_inf())
            log_lo[:n] = log_left
        return cls(
            breakpoints=np.asarray(utility.breakpoints, dtype=float),
            left=left,
            right=right,
            log_left=log_left,
            log_right=log_right,
            log_hi=log_hi,
            log_lo=log_lo,
        )


def terminal_wealth(y_xi, utility: PiecewiseUtility):
    """Terminal wealth map: inverse of the envelope marginal, with atoms.

    For ``y_xi`` inside a kink's marginal gap the result is the breakpoint
    itself; on a piece's marginal range it is that piece's inverse marginal.
    A value equal to a boundary slope resolves to the breakpoint (kinks and
    linear pieces select their left endpoint).
    """
    if not utility.is_concave_instance():
        raise ValueError("terminal wealth needs a concave utility; build the envelope first")
    y_arr = np.atleast_1d(np.asarray(y_xi, dtype=float))
    if np.any(~(y_arr > 0)):
        raise ValueError("y_xi must be positive")

    scalar_in = np.ndim(y_xi) == 0
    n = len(utility.breakpoints)
    out = np.empty_like(y_arr)
    if n == 0:
        out[:] = utility.pieces[0].inverse_marginal(y_arr)
        return float(out[0]) if scalar_in else out

    chain = _SlopeChain.from_utility(utility)
    left, right = chain.left, chain.right
    # descending boundary chain gamma_1^- >= gamma_1^+ >= gamma_2^- >= ...
    desc = np.empty(2 * n)
    desc[0::2] = left
    desc[1::2] = right
    idx = np.searchsorted(-desc, -y_arr, side="left")  # count of boundaries > y

    for window in range(2 * n + 1):
        mask = idx == window
        if not np.any(mask):
            continue
        if window % 2 == 1:
            out[mask] = utility.breakpoints[(window - 1) // 2]
        else:
            piece = utility.pieces[window // 2]
            if piece.is_affine:
                # only reachable at exact slope ties; resolved below
                out[mask] = np.nan
            else:
                out[mask] = piece.inverse_marginal(y_arr[mask])

    # exact boundary hits resolve to the breakpoint (leftmost match wins)
    for i in range(n - 1, -1, -1):
        hit = (y_arr == left[i]) | (y_arr == right[i])
        out[hit] = utility.breakpoints[i]
    assert not np.any(np.isnan(out))
    return float(out[0]) if scalar_in else out


@dataclass(frozen=True)
class WealthComponents:
    """Per-cell wealth split X = atoms + anchors + growth + hedge.

    ``atoms`` holds the kink masses (one per breakpoint, X^D), ``anchors``
    the discounted location shifts (one per piece, X^B), ``growth`` the
    positive-power legs (X^R) and ``hedge`` the negative-power legs
    (X^Rbar, nonpositive).  Leading axes broadcast over the kernel values.
    """

    atoms: np.ndarray
    anchors: np.ndarray
    growth: np.ndarray
    hedge: np.ndarray

    @property
    def atoms_total(self):
        return self.atoms.sum(axis=-1)

    @property
    def anchors_total(self):
        return self.anchors.sum(axis=-1)

    @property
    def growth_total(self):
        return self.growth.sum(axis=-1)

    @property
    def hedge_total(self):
        return self.hedge.sum(axis=-1)

    @property
    def total(self):
        return self.atoms_total + self.anchors_total + self.growth_total + self.hedge_total


@dataclass(frozen=True)
class PortfolioTerms:
    """Four-term split of the optimal risky allocation (amounts per asset).

    ``merton`` is the volatility-scaled leading term, ``adjustment`` the
    smooth density correction, ``kink`` the first-order risk aversion term
    from wealth atoms, ``anchor`` the location-shift term.  ``b`` holds the
    per-piece variance cushions entering the square root of ``merton``.
    """

    merton: np.ndarray
    adjustment: np.ndarray
    kink: np.ndarray
    anchor: np.ndarray
    b: np.ndarray

    @property
    def total(self):
        return self.merton + self.adjustment + self.kink + self.anchor


class _ComponentEngine:
    """Vectorized evaluation of the wealth and portfolio formulas."""

    def __init__(self, utility: PiecewiseUtility, market: MarketModel):
        self.utility = utility
        self.market = market
        self.chain = _SlopeChain.from_utility(utility)
        pieces = utility.pieces
        self.alpha = np.array([p.alpha for p in pieces])
        self.beta = np.array([p.beta for p in pieces])
        self.d = np.array([p.d for p in pieces])
        with np.errstate(divide="ignore"):
            self.log_gamma = np.log(np.array([p.gamma for p in pieces]))
        self.pos = self.alpha > 0

    def tables(self, t: float, log_y_xi: np.ndarray, end: float | None = None):
        """All component families at time t for log(y*xi) values.

        Returns a dict of arrays with leading axis matching ``log_y_xi``.
        """
        market = self.market
        end = market.horizon if end is None else end
        rate_int = market.rate_integral(t, end)
        q = market.theta_sq_integral(t, end)
        if q <= 0.0:
            return self._deterministic_tables(rate_int, log_y_xi)
        sqrt_q = math.sqrt(q)
        disc = math.exp(-rate_int)

        L = log_y_xi[..., None]  # broadcast over cells

        def g0_of(log_slope):
            # log z = log slope - log(y xi); +-inf sentinels flow through
            with np.errstate(invalid="ignore"):
                out = -((log_slope - L) + rate_int - 0.5 * q) / sqrt_q
            return np.where(np.isnan(out), 0.0, out)

        g0_hi = g0_of(self.chain.log_hi)
        g0_lo = g0_of(self.chain.log_lo)
        mass0 = _clamp_mass(_phi(g0_lo) - _phi(g0_hi))

        n_pieces = len(self.alpha)
        shape = log_y_xi.shape + (n_pieces,)
        growth = np.zeros(shape)
        hedge = np.zeros(shape)
        cushions = np.zeros(shape)
        growth_coef = np.zeros(shape)
        hedge_coef = np.zeros(shape)
        dens1 = np.zeros(shape)
        dens2 = np.zeros(shape)

        inv_a = np.where(self.pos, 1.0 / np.where(self.pos, self.alpha, 1.0), 0.0)
        shift = sqrt_q * inv_a
        g1_hi = g0_hi - shift
        g1_lo = g0_lo - shift
        g2_hi = g0_hi + shift
        g2_lo = g0_lo + shift
        mass1 = _clamp_mass(_phi(g1_lo) - _phi(g1_hi))
        mass2 = _clamp_mass(_phi(g2_lo) - _phi(g2_hi))

        with np.errstate(over="ignore", invalid="ignore"):
            log_pow = np.clip(inv_a * (self.log_gamma - L), -EXP_CLAMP, EXP_CLAMP)
            pow_pos = np.exp(log_pow)
            pow_neg = np.exp(-log_pow)
            e_growth = np.exp((-1.0 + inv_a) * (rate_int + 0.5 * q * inv_a))
            e_hedge = np.exp((-1.0 - inv_a) * (rate_int - 0.5 * q * inv_a))
            growth_coef = np.where(self.pos, 0.5 * e_growth * pow_pos, 0.0)
            hedge_coef = np.where(self.pos, -0.5 * self.beta**2 * e_hedge * pow_neg, 0.0)
            growth = np.where(mass1 != 0.0, growth_coef * mass1, 0.0)
            hedge = np.where(mass2 != 0.0, hedge_coef * mass2, 0.0)
            cushion_scale = self.beta**2 * np.exp(2.0 * (-rate_int + 0.5 * q * inv_a**2))
            cushions = np.where(self.pos, cushion_scale * mass1 * mass2, 0.0)
            dens1 = _phi_density(g1_lo) - _phi_density(g1_hi)
            dens2 = _phi_density(g2_lo) - _phi_density(g2_hi)

        anchors = np.where(self.pos, disc * self.d * mass0, 0.0)

        # kink atoms
        g0_right = g0_of(self.chain.log_right)
        g0_left = g0_of(self.chain.log_left)
        atom_mass = _clamp_mass(_phi(g0_right) - _phi(g0_left))
        atoms = disc * self.chain.breakpoints * atom_mass
        atom_dens = _phi_density(g0_right) - _phi_density(g0_left)

        return {
            "rate_int": rate_int,
            "q": q,
            "sqrt_q": sqrt_q,
            "disc": disc,
            "atoms": atoms,
            "anchors": anchors,
            "growth": growth,
            "hedge": hedge,
            "cushions": cushions,
            "growth_coef": growth_coef,
            "hedge_coef": hedge_coef,
            "dens0": _phi_density(g0_lo) - _phi_density(g0_hi),
            "dens1": dens1,
            "dens2": dens2,
            "atom_dens": atom_dens,
            "inv_a": inv_a,
        }

    def _deterministic_tables(self, rate_int: float, log_y_xi: np.ndarray):
        """Zero kernel variance: the terminal kernel is known, masses are 0/1."""
        disc = math.exp(-rate_int)
        log_terminal = log_y_xi[..., None] - rate_int
        in_window = (log_terminal >= self.chain.log_lo) & (log_terminal < self.chain.log_hi)
        mass0 = in_window.astype(float)

        in_atom = (log_terminal[..., : len(self.chain.breakpoints)] >= self.chain.log_right) & (
            log_terminal[..., : len(self.chain.breakpoints)] < self.chain.log_left
        )
        atom_mass = in_atom.astype(float)

        with np.errstate(over="ignore"):
            inv_a = np.where(self.pos, 1.0 / np.where(self.pos, self.alpha, 1.0), 0.0)
            log_pow = np.clip(inv_a * (self.log_gamma - log_terminal), -EXP_CLAMP, EXP_CLAMP)
            half_s = 0.5 * np.exp(log_pow)
            half_b2_over_s = 0.5 * self.beta**2 * np.exp(-log_pow)

        zeros = np.zeros_like(mass0)
        return {
            "rate_int": rate_int,
            "q": 0.0,
            "sqrt_q": 0.0,
            "disc": disc,
            "atoms": disc * self.chain.breakpoints * atom_mass,
            "anchors": np.where(self.pos, disc * self.d * mass0, 0.0),
            "growth": np.where(self.pos, disc * half_s * mass0, 0.0),
            "hedge": np.where(self.pos, -disc * half_b2_over_s * mass0, 0.0),
            "cushions": zeros,
            "growth_coef": zeros,
            "hedge_coef": zeros,
            "dens0": zeros,
            "dens1": zeros,
            "dens2": zeros,
            "atom_dens": np.zeros_like(atom_mass),
            "inv_a": inv_a,
        }

    def components(self, t: float, log_y_xi: np.ndarray) -> WealthComponents:
        tab = self.tables(t, log_y_xi)
        return WealthComponents(
            atoms=tab["atoms"], anchors=tab["anchors"], growth=tab["growth"], hedge=tab["hedge"]
        )

    def scalar_terms(self, t: float, log_y_xi: np.ndarray):
        """The four portfolio scalars (pre asset-direction) and cushions."""
        tab = self.tables(t, log_y_xi)
        if tab["q"] == 0.0:
            zero = np.zeros(log_y_xi.shape)
            return zero, zero.copy(), zero.copy(), zero.copy(), tab["cushions"]
        inv_sq = 1.0 / tab["sqrt_q"]
        legs = tab["growth"] + tab["hedge"]
        term1 = (tab["inv_a"] * np.sqrt(legs**2 + tab["cushions"])).sum(axis=-1)
        with np.errstate(invalid="ignore"):
            smooth = tab["growth_coef"] * tab["dens1"] + tab["hedge_coef"] * tab["dens2"]
        term2 = -inv_sq * np.where(np.isfinite(smooth), smooth, 0.0).sum(axis=-1)
        term3 = -inv_sq * tab["disc"] * (self.chain.breakpoints * tab["atom_dens"]).sum(axis=-1)
        term4 = -inv_sq * tab["disc"] * (np.where(self.pos, self.d, 0.0) * tab["dens0"]).sum(axis=-1)
        return term1, term2, term3, term4, tab["cushions"]


def _log_y_xi(y: float, xi) -> tuple[np.ndarray, bool]:
    xi_arr = np.atleast_1d(np.asarray(xi, dtype=float))
    if np.any(~(xi_arr > 0)):
        raise ValueError("kernel values must be positive")
    return math.log(y) + np.log(xi_arr), np.isscalar(xi) or np.ndim(xi) == 0


def solve_multiplier(utility: PiecewiseUtility, market: MarketModel, x0: float) -> float:
    """Lagrange multiplier with |X_0(y) - x0| below 1e-8.

    The budget map is smooth and strictly decreasing; bracket by geometric
    expansion from y=1, bisect, then polish with the analytic derivative
    dX_0/dy = -(portfolio scalar)/y.
    """
    engine = _ComponentEngine(utility, market)

    def budget(y: float) -> float:
        comp = engine.components(0.0, np.array([math.log(y)]))
        return float(comp.total[0])

    lo = hi = 1.0
    b1 = budget(1.0)
    if b1 > x0:
        for _ in range(60):
            hi *= 10.0
            if budget(hi) <= x0:
                break
        else:
            raise ValueError(f"budget never reaches {x0}: not attainable from above")
        lo = hi / 10.0
    elif b1 < x0:
        for _ in range(60):
            lo /= 10.0
            if budget(lo) >= x0:
                break
        else:
            raise ValueError(f"budget never reaches {x0}: not attainable from below")
        hi = lo * 10.0
    else:
        return 1.0

    for _ in range(200):
        mid = math.sqrt(lo * hi)
        if budget(mid) > x0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-14 * lo:
            break
    y = math.sqrt(lo * hi)

    for _ in range(5):
        log_y = np.array([math.log(y)])
        total = float(engine.components(0.0, log_y).total[0])
        scalars = engine.scalar_terms(0.0, log_y)
        slope_scalar = float(sum(s[0] for s in scalars[:4]))
        if slope_scalar <= 0:
            break
        step = (total - x0) * y / slope_scalar
        y_next = y + step
        if not (0 < y_next < np.inf):
            break
        y = y_next

    residual = abs(budget(y) - x0)
    if not residual < BUDGET_TOL:
        raise ValueError(f"multiplier solve stalled: budget residual {residual:.3e}")
    return y


@dataclass(frozen=True)
class OptimalPolicy:
    """Optimal control for a concave utility in a given market.

    Build with :meth:`solve` to fit the multiplier to an initial budget.
    """

    utility: PiecewiseUtility
    market: MarketModel
    x0: float
    y_star: float

    def __post_init__(self):
        if not self.utility.is_concave_instance():
            raise ValueError("policy needs a concave utility; build the envelope first")
        if not self.y_star > 0:
            raise ValueError("y_star must be positive")
        residual = abs(self.budget() - self.x0)
        if not residual <= 1e-6:
            raise ValueError(
                f"budget residual {residual:.3e} inconsistent with x0; use OptimalPolicy.solve"
            )

    @classmethod
    def solve(cls, utility: PiecewiseUtility, market: MarketModel, x0: float) -> "OptimalPolicy":
        y = solve_multiplier(utility, market, x0)
        return cls(utility=utility, market=market, x0=x0, y_star=y)

    @classmethod
    def from_multiplier(
        cls, utility: PiecewiseUtility, market: MarketModel, y_star: float
    ) -> "OptimalPolicy":
        """Policy for a given multiplier; x0 is the implied time-0 budget."""
        engine = _ComponentEngine(utility, market)
        x0 = float(engine.components(0.0, np.array([math.log(y_star)])).total[0])
        return cls(utility=utility, market=market, x0=x0, y_star=y_star)

    @cached_property
    def _engine(self) -> _ComponentEngine:
        return _ComponentEngine(self.utility, self.market)

    def budget(self) -> float:
        return float(self._engine.components(0.0, np.array([math.log(self.y_star)])).total[0])

    def terminal(self, xi):
        """Optimal terminal wealth at kernel realization(s) xi."""
        return terminal_wealth(self.y_star * np.asarray(xi, dtype=float), self.utility)

    def wealth_components(self, t: float, xi) -> WealthComponents:
        """Wealth split at time t; xi may be scalar or an array."""
        self._check_time(t)
        log_v, scalar = _log_y_xi(self.y_star, xi)
        comp = self._engine.components(t, log_v)
        if scalar:
            return WealthComponents(
                atoms=comp.atoms[0], anchors=comp.anchors[0], growth=comp.growth[0], hedge=comp.hedge[0]
            )
        return comp

    def wealth(self, t: float, xi):
        """Total optimal wealth at time t."""
        return self.wealth_components(t, xi).total

    def portfolio(self, t: float, xi) -> PortfolioTerms:
        """Four-term risky allocation at time t (amounts per asset)."""
        self._check_time(t)
        log_v, scalar = _log_y_xi(self.y_star, xi)
        t1, t2, t3, t4, cushions = self._engine.scalar_terms(t, log_v)
        direction = self.market.merton_direction(t)
        merton = t1[..., None] * direction
        adjustment = t2[..., None] * direction
        kink = t3[..., None] * direction
        anchor = t4[..., None] * direction
        if scalar:
            return PortfolioTerms(
                merton=merton[0], adjustment=adjustment[0], kink=kink[0], anchor=anchor[0], b=cushions[0]
            )
        return PortfolioTerms(merton=merton, adjustment=adjustment, kink=kink, anchor=anchor, b=cushions)

    def portfolio_scalar(self, t: float, xi):
        """Sum of the four portfolio scalars (total = scalar * direction)."""
        self._check_time(t)
        log_v, scalar = _log_y_xi(self.y_star, xi)
        t1, t2, t3, t4, _ = self._engine.scalar_terms(t, log_v)
        out = t1 + t2 + t3 + t4
        return float(out[0]) if scalar else out

    def asymptotic_limits(self, t: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
        """Merton ratios pi/X approached as the kernel tends to 0 and to inf."""
        alpha_last = self.utility.pieces[-1].alpha
        alpha_first = self.utility.pieces[0].alpha
        if alpha_last <= 0 or alpha_first <= 0:
            raise ValueError("asymptotic limits need positive alpha on both end pieces")
        direction = self.market.merton_direction(t)
        return direction / alpha_last, -direction / alpha_first

    def _check_time(self, t: float):
        if not 0.0 <= t < self.market.horizon:
            raise ValueError(
                f"time {t} outside [0, {self.market.horizon}); use terminal() at the horizon"
            )


def _incentive_pieces(
    participation: float,
    base_share: float,
    benchmark: float,
    alpha: float,
    beta: float,
    d: float,
) -> tuple[UtilityPiece, UtilityPiece]:
    """The two smooth cells of the composed incentive utility."""
    lower = UtilityPiece(
        alpha=alpha,
        beta=beta / base_share,
        d=d / base_share,
        gamma=base_share ** (1.0 - alpha),
    )
    total_share = participation + base_share
    upper_raw = UtilityPiece(
        alpha=alpha,
        beta=beta / total_share,
        d=(participation * benchmark + d) / total_share,
        gamma=total_share ** (1.0 - alpha),
    )
    level = float(lower.value(benchmark)) - float(upper_raw.value(benchmark))
    upper = UtilityPiece(
        alpha=alpha, beta=upper_raw.beta, d=upper_raw.d, gamma=upper_raw.gamma, u=level
    )
    return lower, upper


def incentive_portfolio(
    t: float,
    xi: float,
    market: MarketModel,
    x0: float,
    participation: float,
    base_share: float,
    benchmark: float,
    alpha: float,
    beta: float,
    d: float = 0.0,
) -> np.ndarray:
    """Optimal allocation for a convex two-slope incentive scheme, directly.

    Evaluates the dedicated three-term formula for the envelope of a
    utility composed with ``base_share * x + participation * (x - B)+``:
    the envelope is differentiable with a single linear span across the
    benchmark, so no kink term appears.  Independent of the generic
    pipeline; agreement with it is the cross-check.
    """
    if not 0 < base_share:
        raise ValueError("base_share must be positive")
    if participation <= 0:
        raise ValueError("participation must be positive for the two-slope scheme")
    lower, upper = _incentive_pieces(participation, base_share, benchmark, alpha, beta, d)

    # shared tangent slope: conjugates of the two cells tie at s*
    def conjugate_gap(s: float) -> float:
        x_lo = float(lower.inverse_marginal(s))
        x_hi = float(upper.inverse_marginal(s))
        return (float(lower.value(x_lo)) - s * x_lo) - (float(upper.value(x_hi)) - s * x_hi)

    # the composite marginal jumps up across the benchmark, so the two
    # one-sided marginals there bracket the tangent slope
    s_lo = float(lower.marginal(benchmark))
    s_hi = float(upper.marginal(benchmark))
    for _ in range(200):
        mid = math.sqrt(s_lo * s_hi)
        if conjugate_gap(mid) > 0:
            s_hi = mid
        else:
            s_lo = mid
        if s_hi - s_lo <= 1e-15 * s_hi:
            break
    s_star = math.sqrt(s_lo * s_hi)

    rate_int = market.rate_integral(t, market.horizon)
    q = market.theta_sq_integral(t, market.horizon)
    if q <= 0:
        raise ValueError("degenerate kernel; incentive formula needs positive variance")
    sqrt_q = math.sqrt(q)
    disc = math.exp(-rate_int)
    inv_a = 1.0 / alpha

    def leg_tables(y_xi_log: float, full_rate: float, full_q: float):
        """Component values for the two cells at log(y xi)."""
        sq = math.sqrt(full_q)

        def g0_at(log_slope: float) -> float:
            return -((log_slope - y_xi_log) + full_rate - 0.5 * full_q) / sq

        e_growth = math.exp((-1.0 + inv_a) * (full_rate + 0.5 * full_q * inv_a))
        e_hedge = math.exp((-1.0 - inv_a) * (full_rate - 0.5 * full_q * inv_a))
        log_s = math.log(s_star)
        out = []
        for piece, lo_slope, hi_slope in (
            (lower, log_s, np.inf),
            (upper, -np.inf, log_s),
        ):
            g0_lo, g0_hi = g0_at(lo_slope), g0_at(hi_slope)
            shift = sq * inv_a
            mass1 = float(_phi(g0_lo - shift) - _phi(g0_hi - shift))
            mass2 = float(_phi(g0_lo + shift) - _phi(g0_hi + shift))
            mass0 = float(_phi(g0_lo) - _phi(g0_hi))
            log_gamma = math.log(piece.gamma)
            pow_pos = math.exp(min(max(inv_a * (log_gamma - y_xi_log), -EXP_CLAMP), EXP_CLAMP))
            growth_c = 0.5 * e_growth * pow_pos
            hedge_c = -0.5 * piece.beta**2 * e_hedge / pow_pos
            cushion = piece.beta**2 * math.exp(2.0 * (-full_rate + 0.5 * full_q * inv_a**2)) * mass1 * mass2
            out.append(
                {
                    "piece": piece,
                    "growth": growth_c * mass1,
                    "hedge": hedge_c * mass2,
                    "growth_c": growth_c,
                    "hedge_c": hedge_c,
                    "cushion": cushion,
                    "mass0": mass0,
                    "dens0": float(_phi_density(g0_lo) - _phi_density(g0_hi)),
                    "dens1": float(_phi_density(g0_lo - shift) - _phi_density(g0_hi - shift)),
                    "dens2": float(_phi_density(g0_lo + shift) - _phi_density(g0_hi + shift)),
                }
            )
        return out

    def budget(y: float) -> float:
        full_rate = market.rate_integral(0.0, market.horizon)
        full_q = market.theta_sq_integral(0.0, market.horizon)
        exp_disc = math.exp(-full_rate)
        total = 0.0
        for leg in leg_tables(math.log(y), full_rate, full_q):
            total += exp_disc * leg["piece"].d * leg["mass0"] + leg["growth"] + leg["hedge"]
        return total

    y_lo = y_hi = 1.0
    if budget(1.0) > x0:
        for _ in range(60):
            y_hi *= 10.0
            if budget(y_hi) <= x0:
                break
        else:
            raise ValueError(f"incentive budget never reaches {x0}")
        y_lo = y_hi / 10.0
    else:
        for _ in range(60):
            y_lo /= 10.0
            if budget(y_lo) >= x0:
                break
        else:
            raise ValueError(f"incentive budget never reaches {x0}")
        y_hi = y_lo * 10.0
    for _ in range(200):
        mid = math.sqrt(y_lo * y_hi)
        if budget(mid) > x0:
            y_lo = mid
        else:
            y_hi = mid
    y_star = math.sqrt(y_lo * y_hi)

    legs = leg_tables(math.log(y_star) + math.log(xi), rate_int, q)
    term1 = sum(
        inv_a * math.sqrt((leg["growth"] + leg["hedge"]) ** 2 + leg["cushion"]) for leg in legs
    )
    term2 = -(1.0 / sqrt_q) * sum(
        leg["growth_c"] * leg["dens1"] + leg["hedge_c"] * leg["dens2"] for leg in legs
    )
    term3 = -(1.0 / sqrt_q) * disc * sum(leg["piece"].d * leg["dens0"] for leg in legs)
    direction = market.merton_direction(t)
    return (term1 + term2 + term3) * direction
