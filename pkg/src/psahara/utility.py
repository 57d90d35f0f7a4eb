"""Symmetric asymptotic hyperbolic absolute risk aversion (SAHARA) utilities.

This module implements the scalar SAHARA family, single scaled pieces built
from it, and continuous piecewise assemblies of such pieces on a breakpoint
partition of the real line.  The piecewise container is the common currency
of the rest of the package: the envelope builder consumes and produces it,
and the portfolio formulas read their slope windows off it.

The base member ``sahara_value(x, alpha, beta, d)`` is normalized so that its
derivative is exactly ``S(x)**-alpha`` with ``S(x) = (x-d) + sqrt(beta**2 +
(x-d)**2)``.  A piece scales the base by ``gamma`` and shifts by ``u``; the
degenerate codes are ``alpha == 0`` for an affine piece and ``hara_limit``
(with ``beta == 0``) for the hyperbolic limit on ``(d, inf)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "sahara_value",
    "sahara_marginal",
    "sahara_marginal_derivative",
    "sahara_inverse_marginal",
    "absolute_risk_aversion",
    "UtilityPiece",
    "PiecewiseUtility",
    "LinearSegment",
    "PiecewiseLinearMap",
    "incentive_contract",
    "compose_with_map",
]

# Exponent magnitude beyond which powers saturate to 0/inf sentinels.
EXP_CLAMP = 700.0

# Slope drop at a breakpoint below this relative threshold is treated as
# differentiable rather than a kink.
KINK_REL_TOL = 1e-6

# Breakpoints closer than this are considered duplicates.
BREAKPOINT_MERGE_TOL = 1e-12

# Maximum absolute value mismatch for the continuity check at breakpoints.
CONTINUITY_TOL = 1e-10


def _as_array(x):
    scalar = np.isscalar(x) or (isinstance(x, np.ndarray) and x.ndim == 0)
    return np.atleast_1d(np.asarray(x, dtype=float)), scalar


def _maybe_scalar(out, scalar):
    return float(out[0]) if scalar else out


def _exp_clamped(t):
    """exp with +/-EXP_CLAMP saturation to inf/0 sentinels."""
    t = np.asarray(t, dtype=float)
    out = np.empty_like(t)
    hi = t > EXP_CLAMP
    lo = t < -EXP_CLAMP
    mid = ~(hi | lo)
    out[hi] = np.inf
    out[lo] = 0.0
    out[mid] = np.exp(t[mid])
    return out


def _log_s(x, beta, d):
    """log of S(x) = (x - d) + sqrt(beta^2 + (x - d)^2), cancellation safe.

    For ``x < d`` the direct sum loses precision, so the identity
    ``S = beta^2 / (sqrt(beta^2 + w^2) - w)`` is used instead.
    """
    w = np.asarray(x, dtype=float) - d
    root = np.hypot(beta, w)
    with np.errstate(divide="ignore", over="ignore"):
        pos = np.log(w + root)
        neg = 2.0 * math.log(beta) - np.log(root - w) if beta > 0 else np.full_like(w, -np.inf)
    return np.where(w >= 0, pos, neg)


def sahara_value(x, alpha: float, beta: float, d: float):
    """Value of the normalized SAHARA base utility.

    Parameters
    ----------
    x : float or ndarray
        Wealth levels, anywhere on the real line (``x > d`` when ``beta == 0``).
    alpha : float
        Risk-aversion scale, positive.  ``alpha == 1`` switches to the
        logarithmic branch.
    beta : float
        Risk-aversion shape, positive (``0`` only in the hyperbolic limit).
    d : float
        Threshold wealth, the location of maximal risk aversion.

    Returns
    -------
    float or ndarray
        Utility values; ``-inf``/``+inf`` sentinels where the defining
        exponents leave the representable range.
    """
    xa, scalar = _as_array(x)
    w = xa - d
    root = np.hypot(beta, w)
    ls = _log_s(xa, beta, d)
    if abs(alpha - 1.0) < 1e-9:
        # 0.5*log(S) + w/(2S); the second term is the stable form of the
        # usual 0.5*beta^-2*w*(root - w).
        with np.errstate(over="ignore", invalid="ignore"):
            out = 0.5 * ls + 0.5 * w * _exp_clamped(-ls)
    else:
        coeff = -1.0 / (alpha ** 2 - 1.0)
        with np.errstate(over="ignore", invalid="ignore"):
            out = coeff * _exp_clamped(-alpha * ls) * (w + alpha * root)
        # 0 * inf at the saturated end resolves to the coercive limit.
        bad = np.isnan(out)
        if np.any(bad):
            out[bad] = -np.inf if alpha > 1 else 0.0
    return _maybe_scalar(out, scalar)


def sahara_marginal(x, alpha: float, beta: float, d: float):
    """First derivative ``S(x)**-alpha`` of the base utility."""
    xa, scalar = _as_array(x)
    out = _exp_clamped(-alpha * _log_s(xa, beta, d))
    return _maybe_scalar(out, scalar)


def absolute_risk_aversion(x, alpha: float, beta: float, d: float):
    """Absolute risk aversion ``alpha / sqrt(beta^2 + (x - d)^2)``."""
    xa, scalar = _as_array(x)
    out = alpha / np.hypot(beta, xa - d)
    return _maybe_scalar(out, scalar)


def sahara_marginal_derivative(x, alpha: float, beta: float, d: float):
    """Second derivative of the base utility, ``-ARA(x) * S(x)**-alpha``."""
    xa, scalar = _as_array(x)
    out = -absolute_risk_aversion(xa, alpha, beta, d) * sahara_marginal(xa, alpha, beta, d)
    return _maybe_scalar(out, scalar)


def sahara_inverse_marginal(y, alpha: float, beta: float, d: float):
    """Wealth level at which the base marginal equals ``y > 0``.

    Solves ``S(x)**-alpha = y`` through ``x = d + (s - beta^2/s)/2`` with
    ``s = y**(-1/alpha)``, which is exact on both sides of ``d``.
    """
    ya, scalar = _as_array(y)
    if np.any(ya <= 0):
        raise ValueError("marginal utility values must be positive")
    log_s = -np.log(ya) / alpha
    s = _exp_clamped(log_s)
    s_inv = _exp_clamped(-log_s)
    with np.errstate(invalid="ignore"):
        out = d + 0.5 * (s - beta ** 2 * s_inv)
    out[np.isposinf(s)] = np.inf
    if beta > 0:
        out[s == 0.0] = -np.inf
    else:
        out[s == 0.0] = d
    return _maybe_scalar(out, scalar)


@dataclass(frozen=True)
class UtilityPiece:
    """One cell of a piecewise utility: ``gamma * base(x) + u``.

    ``alpha == 0`` encodes an affine cell with slope ``gamma`` and value
    ``gamma * (x - d) + u``.  ``hara_limit`` marks the ``beta == 0``
    hyperbolic member, defined only for ``x > d``.
    """

    alpha: float
    beta: float
    d: float
    gamma: float
    u: float = 0.0
    hara_limit: bool = False

    def validate(self) -> list[str]:
        errors = []
        if not math.isfinite(self.alpha) or self.alpha < 0:
            errors.append(f"alpha must be finite and >= 0, got {self.alpha}")
        if self.gamma <= 0 or not math.isfinite(self.gamma):
            errors.append(f"gamma must be finite and > 0, got {self.gamma}")
        if self.hara_limit:
            if self.beta != 0.0:
                errors.append(f"hara_limit pieces require beta == 0, got {self.beta}")
            if self.alpha == 0:
                errors.append("hara_limit pieces require alpha > 0")
        elif self.alpha > 0 and (self.beta <= 0 or not math.isfinite(self.beta)):
            errors.append(f"beta must be finite and > 0, got {self.beta}")
        if not math.isfinite(self.d):
            errors.append(f"d must be finite, got {self.d}")
        if not math.isfinite(self.u):
            errors.append(f"u must be finite, got {self.u}")
        return errors

    @property
    def is_affine(self) -> bool:
        return self.alpha == 0.0

    def value(self, x):
        if self.is_affine:
            xa, scalar = _as_array(x)
            return _maybe_scalar(self.gamma * (xa - self.d) + self.u, scalar)
        return self.gamma * sahara_value(x, self.alpha, self.beta, self.d) + self.u

    def marginal(self, x):
        if self.is_affine:
            xa, scalar = _as_array(x)
            return _maybe_scalar(np.full_like(xa, self.gamma), scalar)
        return self.gamma * sahara_marginal(x, self.alpha, self.beta, self.d)

    def marginal_derivative(self, x):
        if self.is_affine:
            xa, scalar = _as_array(x)
            return _maybe_scalar(np.zeros_like(xa), scalar)
        return self.gamma * sahara_marginal_derivative(x, self.alpha, self.beta, self.d)

    def inverse_marginal(self, y):
        """Wealth where the piece marginal equals ``y``; affine pieces have none."""
        if self.is_affine:
            raise ValueError("affine pieces have constant marginal, no inverse exists")
        ya, scalar = _as_array(y)
        out = np.atleast_1d(
            sahara_inverse_marginal(ya / self.gamma, self.alpha, self.beta, self.d)
        )
        return _maybe_scalar(out, scalar)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "beta": self.beta,
            "d": self.d,
            "gamma": self.gamma,
            "u": self.u,
            "hara_limit": self.hara_limit,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "UtilityPiece":
        known = {"alpha", "beta", "d", "gamma", "u", "hara_limit"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown piece fields: {sorted(unknown)}")
        missing = {"alpha", "beta", "d", "gamma"} - set(data)
        if missing:
            raise ValueError(f"piece is missing required fields: {sorted(missing)}")
        return cls(
            alpha=float(data["alpha"]),
            beta=float(data["beta"]),
            d=float(data["d"]),
            gamma=float(data["gamma"]),
            u=float(data.get("u", 0.0)),
            hara_limit=bool(data.get("hara_limit", False)),
        )


@dataclass(frozen=True)
class PiecewiseUtility:
    """Continuous piecewise utility on breakpoints ``a_1 < ... < a_n``.

    ``pieces[k]`` applies on ``[a_k, a_{k+1})`` with ``a_0 = -inf`` and
    ``a_{n+1} = +inf``; evaluation at a breakpoint uses the right piece.
    """

    breakpoints: tuple[float, ...]
    pieces: tuple[UtilityPiece, ...]

    def __post_init__(self):
        object.__setattr__(self, "breakpoints", tuple(float(b) for b in self.breakpoints))
        object.__setattr__(
            self,
            "pieces",
            tuple(p if isinstance(p, UtilityPiece) else UtilityPiece(**p) for p in self.pieces),
        )
        if len(self.pieces) != len(self.breakpoints) + 1:
            raise ValueError(
                f"need exactly {len(self.breakpoints) + 1} pieces for "
                f"{len(self.breakpoints)} breakpoints, got {len(self.pieces)}"
            )

    @property
    def n_breakpoints(self) -> int:
        return len(self.breakpoints)

    def piece_index(self, x):
        """Index of the governing piece; right piece at a breakpoint."""
        xa, scalar = _as_array(x)
        idx = np.searchsorted(np.asarray(self.breakpoints), xa, side="right")
        return int(idx[0]) if scalar else idx

    def _per_piece(self, x, attr):
        xa, scalar = _as_array(x)
        idx = np.searchsorted(np.asarray(self.breakpoints), xa, side="right")
        out = np.empty_like(xa)
        for k, piece in enumerate(self.pieces):
            mask = idx == k
            if np.any(mask):
                out[mask] = np.atleast_1d(getattr(piece, attr)(xa[mask]))
        return _maybe_scalar(out, scalar)

    def value(self, x):
        """Utility at ``x`` (vectorized)."""
        return self._per_piece(x, "value")

    def marginal(self, x):
        """Marginal utility at ``x`` (vectorized, right derivative at kinks)."""
        return self._per_piece(x, "marginal")

    def marginal_derivative(self, x):
        return self._per_piece(x, "marginal_derivative")

    def left_slopes(self) -> np.ndarray:
        """Marginals just left of each breakpoint (length ``n``)."""
        return np.array(
            [self.pieces[k].marginal(a) for k, a in enumerate(self.breakpoints)]
        )

    def right_slopes(self) -> np.ndarray:
        """Marginals just right of each breakpoint (length ``n``)."""
        return np.array(
            [self.pieces[k + 1].marginal(a) for k, a in enumerate(self.breakpoints)]
        )

    def marginal_sup(self) -> float:
        """Supremum of the marginal over the leftmost piece."""
        first = self.pieces[0]
        return first.gamma if first.is_affine else np.inf

    def marginal_inf(self) -> float:
        """Infimum of the marginal over the rightmost piece."""
        last = self.pieces[-1]
        return last.gamma if last.is_affine else 0.0

    def kink_indices(self, rel_tol: float = KINK_REL_TOL) -> list[int]:
        """Breakpoint indices where the marginal drops by more than rel_tol."""
        left = self.left_slopes()
        right = self.right_slopes()
        return [k for k in range(self.n_breakpoints) if left[k] - right[k] > rel_tol * left[k]]

    def kinks(self, rel_tol: float = KINK_REL_TOL) -> list[float]:
        """Breakpoints at which the utility is not differentiable."""
        return [self.breakpoints[k] for k in self.kink_indices(rel_tol)]

    def is_concave_instance(self, rel_tol: float = KINK_REL_TOL) -> bool:
        """True when the marginal chain is nonincreasing across breakpoints."""
        left = self.left_slopes()
        right = self.right_slopes()
        for k in range(self.n_breakpoints):
            scale = max(abs(left[k]), abs(right[k]), 1e-300)
            if right[k] - left[k] > rel_tol * scale:
                return False
        return True

    def validate(self) -> list[str]:
        """Collect structural violations; empty list means well-formed."""
        errors = []
        for k, piece in enumerate(self.pieces):
            errors.extend(f"piece {k}: {msg}" for msg in piece.validate())
        bps = np.asarray(self.breakpoints)
        if bps.size and not np.all(np.isfinite(bps)):
            errors.append("breakpoints must be finite")
            return errors
        if bps.size > 1:
            gaps = np.diff(bps)
            if np.any(gaps <= BREAKPOINT_MERGE_TOL):
                errors.append(
                    "breakpoints must be strictly increasing with gaps above "
                    f"{BREAKPOINT_MERGE_TOL}"
                )
        for k, a in enumerate(self.breakpoints):
            lo = self.pieces[k]
            if lo.hara_limit and a <= lo.d:
                errors.append(f"piece {k}: hara_limit domain start {lo.d} reaches breakpoint {a}")
            left = self.pieces[k].value(a)
            right = self.pieces[k + 1].value(a)
            scale = max(abs(left), abs(right), 1.0)
            if not (abs(left - right) <= CONTINUITY_TOL * scale):
                errors.append(
                    f"discontinuity at breakpoint {a!r}: left value {left!r}, right value {right!r}"
                )
        return errors

    def validate_strict(self) -> "PiecewiseUtility":
        errors = self.validate()
        if errors:
            raise ValueError("invalid piecewise utility: " + "; ".join(errors))
        return self

    def shift(self, offset: float) -> "PiecewiseUtility":
        """Add a constant to every piece (utility is unique up to level)."""
        return PiecewiseUtility(
            self.breakpoints,
            tuple(replace(p, u=p.u + offset) for p in self.pieces),
        )

    def to_dict(self) -> dict:
        return {
            "breakpoints": list(self.breakpoints),
            "pieces": [p.to_dict() for p in self.pieces],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PiecewiseUtility":
        if not isinstance(data, dict):
            raise ValueError("utility document must be a JSON object")
        missing = {"breakpoints", "pieces"} - set(data)
        if missing:
            raise ValueError(f"utility document is missing fields: {sorted(missing)}")
        return cls(
            breakpoints=tuple(float(b) for b in data["breakpoints"]),
            pieces=tuple(UtilityPiece.from_dict(p) for p in data["pieces"]),
        )

    def to_json(self, **kwargs) -> str:
        kwargs.setdefault("indent", 2)
        kwargs.setdefault("sort_keys", True)
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_json(cls, text: str) -> "PiecewiseUtility":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class LinearSegment:
    """One branch of a piecewise linear map, active from ``start`` rightward."""

    start: float | None
    slope: float
    intercept: float

    def __call__(self, x):
        return self.slope * np.asarray(x, dtype=float) + self.intercept


@dataclass(frozen=True)
class PiecewiseLinearMap:
    """Increasing continuous piecewise linear wealth transform.

    Segments are ordered; the first has ``start is None`` (active from
    ``-inf``) and each later ``start`` is the kink where its branch takes
    over.  Used to push a compensation contract through a utility.
    """

    segments: tuple[LinearSegment, ...]

    def __post_init__(self):
        segs = tuple(
            s if isinstance(s, LinearSegment) else LinearSegment(**s) for s in self.segments
        )
        object.__setattr__(self, "segments", segs)
        if not segs:
            raise ValueError("a piecewise linear map needs at least one segment")
        if segs[0].start is not None:
            raise ValueError("the first segment must have start == null")
        kinks = [s.start for s in segs[1:]]
        if any(k is None for k in kinks):
            raise ValueError("only the first segment may have start == null")
        if any(b <= a for a, b in zip(kinks, kinks[1:])):
            raise ValueError("segment starts must be strictly increasing")
        for s in segs:
            if s.slope <= 0 or not math.isfinite(s.slope):
                raise ValueError(f"segment slopes must be finite and > 0, got {s.slope}")
        for prev, nxt in zip(segs, segs[1:]):
            left = prev(nxt.start)
            right = nxt(nxt.start)
            if abs(left - right) > CONTINUITY_TOL * max(1.0, abs(left), abs(right)):
                raise ValueError(
                    f"map is discontinuous at {nxt.start}: {left} vs {right}"
                )

    @property
    def kinks(self) -> list[float]:
        return [s.start for s in self.segments[1:]]

    def segment_at(self, x: float) -> LinearSegment:
        idx = 0
        for j, s in enumerate(self.segments[1:], start=1):
            if x >= s.start:
                idx = j
        return self.segments[idx]

    def __call__(self, x):
        xa, scalar = _as_array(x)
        starts = np.array([-np.inf] + [s.start for s in self.segments[1:]])
        idx = np.searchsorted(starts, xa, side="right") - 1
        out = np.empty_like(xa)
        for j, s in enumerate(self.segments):
            mask = idx == j
            if np.any(mask):
                out[mask] = s(xa[mask])
        return _maybe_scalar(out, scalar)

    def inverse(self, y):
        """Preimage under the map (strictly increasing, hence well defined)."""
        ya, scalar = _as_array(y)
        # segment j covers values in [value(start_j), value(start_{j+1}))
        cut_values = np.array([self.segments[j](self.segments[j].start) for j in range(1, len(self.segments))])
        idx = np.searchsorted(cut_values, ya, side="right")
        out = np.empty_like(ya)
        for j, s in enumerate(self.segments):
            mask = idx == j
            if np.any(mask):
                out[mask] = (ya[mask] - s.intercept) / s.slope
        return _maybe_scalar(out, scalar)

    def to_dict(self) -> dict:
        return {
            "segments": [
                {"from": s.start, "slope": s.slope, "intercept": s.intercept}
                for s in self.segments
            ]
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PiecewiseLinearMap":
        if "segments" not in data:
            raise ValueError("contract document is missing 'segments'")
        segs = []
        for raw in data["segments"]:
            unknown = set(raw) - {"from", "slope", "intercept"}
            if unknown:
                raise ValueError(f"unknown contract fields: {sorted(unknown)}")
            segs.append(
                LinearSegment(
                    start=None if raw.get("from") is None else float(raw["from"]),
                    slope=float(raw["slope"]),
                    intercept=float(raw.get("intercept", 0.0)),
                )
            )
        return cls(segments=tuple(segs))


def incentive_contract(participation: float, base_share: float, benchmark: float) -> PiecewiseLinearMap:
    """Manager compensation ``participation*(x - benchmark)^+ + base_share*x``.

    Returns the increasing piecewise linear map with a single kink at the
    benchmark wealth.
    """
    if participation < 0 or base_share <= 0:
        raise ValueError("participation must be >= 0 and base_share > 0")
    if participation == 0:
        return PiecewiseLinearMap((LinearSegment(None, base_share, 0.0),))
    return PiecewiseLinearMap(
        (
            LinearSegment(None, base_share, 0.0),
            LinearSegment(benchmark, participation + base_share, -participation * benchmark),
        )
    )


def compose_with_map(utility: PiecewiseUtility, contract: PiecewiseLinearMap) -> PiecewiseUtility:
    """Utility of contracted wealth, ``x -> U(contract(x))``, as a new assembly.

    On each cell where the contract is ``A x + B`` and the utility piece has
    parameters ``(alpha, beta, d, gamma)``, the composition is again a piece
    with parameters ``(alpha, beta/A, (d - B)/A, A**(1-alpha) * gamma)``; the
    additive constant is calibrated at one interior anchor, which is exact
    for every branch including ``alpha == 1``.
    """
    cuts = sorted(
        set(contract.kinks)
        | {float(contract.inverse(a)) for a in utility.breakpoints}
    )
    merged = []
    for c in cuts:
        if not merged or c - merged[-1] > BREAKPOINT_MERGE_TOL:
            merged.append(c)
    pieces = []
    edges = [-np.inf] + merged + [np.inf]
    for lo, hi in zip(edges[:-1], edges[1:]):
        if np.isinf(lo) and np.isinf(hi):
            anchor = 0.0
        elif np.isinf(lo):
            anchor = hi - 1.0
        elif np.isinf(hi):
            anchor = lo + 1.0
        else:
            anchor = 0.5 * (lo + hi)
        seg = contract.segment_at(anchor)
        A, B = seg.slope, seg.intercept
        src = utility.pieces[utility.piece_index(float(seg(anchor)))]
        target = float(src.value(seg(anchor)))
        if src.is_affine:
            new = UtilityPiece(alpha=0.0, beta=src.beta, d=(src.d - B) / A,
                               gamma=src.gamma * A, u=0.0, hara_limit=False)
        else:
            new = UtilityPiece(
                alpha=src.alpha,
                beta=src.beta / A,
                d=(src.d - B) / A,
                gamma=src.gamma * A ** (1.0 - src.alpha),
                u=0.0,
                hara_limit=src.hara_limit,
            )
        offset = target - float(new.value(anchor))
        pieces.append(replace(new, u=offset))
    return PiecewiseUtility(tuple(merged), tuple(pieces))
