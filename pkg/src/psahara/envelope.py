"""Concave envelope construction for piecewise utilities.

The builder accepts possibly non-concave raw inputs whose cells may hold,
besides scaled SAHARA members, a few auxiliary shapes (affine ramps, power
gap cliffs, constants).  It returns the least concave majorant as a strict
piecewise utility: the original pieces where the envelope touches them, and
affine bridge pieces across the regions it spans.

The sweep works in support-function space.  Each cell ``k`` contributes the
partial conjugate ``f_k(s) = sup_x {U_k(x) - s x}`` with an explicitly known
maximizer (the inverse marginal clamped to the cell, or a cell corner).  For
cells ordered left to right, ``f_i - f_j`` is nondecreasing in ``s`` with
derivative ``x_j(s) - x_i(s) >= 0``, so each pair crosses at most once and
the upper envelope of the conjugates is recovered by walking slopes downward
from the leftmost cell, always jumping to the rightward cell with the
largest crossing slope.  A crossing with distinct maximizers is a bridge; a
maximizer parked at a cell corner across a slope interval is a kink.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from psahara.utility import (
    BREAKPOINT_MERGE_TOL,
    PiecewiseUtility,
    UtilityPiece,
)

__all__ = [
    "RawPiecewiseUtility",
    "Bridge",
    "EnvelopeResult",
    "concave_envelope",
    "verify_envelope",
]

# Log-spaced slope samples used to tighten root brackets in the sweep.
SLOPE_GRID_POINTS = 256

# Conjugate differences within this relative band count as ties.
TIE_REL_TOL = 1e-12

# Zero-length arcs and bridges below this width collapse into one breakpoint.
JUNCTION_MERGE_TOL = 1e-11

# Narrower spans than this are tangential handoffs, not bridges: at such a
# junction the tie equation has a quadratic touch, so its root is resolvable
# only to about sqrt(machine eps) in x even though the value error stays at
# machine precision.
BRIDGE_MIN_WIDTH = 1e-7


@dataclass(frozen=True)
class RawSahara:
    """Raw cell holding a scaled SAHARA (or affine) piece."""

    piece: UtilityPiece

    kind = "sahara"

    def value(self, x):
        return self.piece.value(x)

    def argmax_minus_linear(self, s: float, lo: float, hi: float) -> float:
        p = self.piece
        if p.is_affine:
            return lo if s >= p.gamma else hi
        x = float(p.inverse_marginal(s))
        return min(max(x, lo), hi)

    def marginal(self, x):
        return self.piece.marginal(x)

    def validate(self) -> list[str]:
        return self.piece.validate()

    def to_dict(self) -> dict:
        return self.piece.to_dict()


@dataclass(frozen=True)
class RawAffine:
    """Raw affine cell ``slope * x + intercept``; any finite slope."""

    slope: float
    intercept: float

    kind = "affine"

    def value(self, x):
        return self.slope * np.asarray(x, dtype=float) + self.intercept

    def argmax_minus_linear(self, s: float, lo: float, hi: float) -> float:
        return lo if s >= self.slope else hi

    def marginal(self, x):
        return np.full_like(np.asarray(x, dtype=float), self.slope)

    def validate(self) -> list[str]:
        if not math.isfinite(self.slope) or not math.isfinite(self.intercept):
            return ["affine pieces need finite slope and intercept"]
        return []

    def to_dict(self) -> dict:
        return {"kind": "affine", "slope": self.slope, "intercept": self.intercept}


@dataclass(frozen=True)
class RawPowerGap:
    """Raw cell ``coef * (anchor - x)**exponent + u`` on ``x < anchor``."""

    coef: float
    exponent: float
    anchor: float
    u: float

    kind = "power_gap"

    def value(self, x):
        gap = self.anchor - np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            out = np.where(gap > 0, self.coef * gap ** self.exponent + self.u, -np.inf)
        return np.where(np.isnan(out), -np.inf, out)

    def marginal(self, x):
        gap = self.anchor - np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", over="ignore"):
            return -self.coef * self.exponent * gap ** (self.exponent - 1.0)

    def _concave(self) -> bool:
        return self.coef * self.exponent * (self.exponent - 1.0) <= 0

    def argmax_minus_linear(self, s: float, lo: float, hi: float) -> float:
        hi = min(hi, self.anchor)
        m_lo = float(self.marginal(lo))
        m_hi = float(self.marginal(hi))
        if self._concave():
            if s >= m_lo:
                return lo
            if s <= m_hi:
                return hi
            # solve -coef * exponent * gap**(exponent-1) = s
            base = s / (-self.coef * self.exponent)
            gap = base ** (1.0 / (self.exponent - 1.0))
            return min(max(self.anchor - gap, lo), hi)
        at_lo = float(self.value(lo)) - s * lo
        at_hi = float(self.value(hi)) - s * hi
        return lo if at_lo >= at_hi else hi

    def validate(self) -> list[str]:
        errors = []
        if self.coef == 0 or not math.isfinite(self.coef):
            errors.append("power_gap coef must be finite and nonzero")
        if self.exponent == 1.0 or not math.isfinite(self.exponent):
            errors.append("power_gap exponent must be finite and != 1 (use affine)")
        if not math.isfinite(self.anchor) or not math.isfinite(self.u):
            errors.append("power_gap anchor and u must be finite")
        if self.exponent < 0 and self.coef > 0:
            errors.append("power_gap diverges to +inf at its anchor, no envelope exists")
        return errors

    def to_dict(self) -> dict:
        return {
            "kind": "power_gap",
            "coef": self.coef,
            "exponent": self.exponent,
            "anchor": self.anchor,
            "u": self.u,
        }


@dataclass(frozen=True)
class RawConstant:
    """Raw constant cell."""

    u: float

    kind = "constant"

    def value(self, x):
        return np.full_like(np.asarray(x, dtype=float), self.u)

    def marginal(self, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def argmax_minus_linear(self, s: float, lo: float, hi: float) -> float:
        return lo

    def validate(self) -> list[str]:
        return [] if math.isfinite(self.u) else ["constant pieces need a finite u"]

    def to_dict(self) -> dict:
        return {"kind": "constant", "u": self.u}


def _raw_piece_from_dict(data: dict):
    kind = data.get("kind", "sahara")
    if kind == "sahara":
        fields = {k: v for k, v in data.items() if k != "kind"}
        return RawSahara(UtilityPiece.from_dict(fields))
    if kind == "affine":
        unknown = set(data) - {"kind", "slope", "intercept"}
        if unknown:
            raise ValueError(f"unknown affine piece fields: {sorted(unknown)}")
        return RawAffine(float(data["slope"]), float(data.get("intercept", 0.0)))
    if kind == "power_gap":
        unknown = set(data) - {"kind", "coef", "exponent", "anchor", "u"}
        if unknown:
            raise ValueError(f"unknown power_gap piece fields: {sorted(unknown)}")
        return RawPowerGap(
            float(data["coef"]),
            float(data["exponent"]),
            float(data["anchor"]),
            float(data.get("u", 0.0)),
        )
    if kind == "constant":
        unknown = set(data) - {"kind", "u"}
        if unknown:
            raise ValueError(f"unknown constant piece fields: {sorted(unknown)}")
        return RawConstant(float(data["u"]))
    raise ValueError(f"unknown piece kind {kind!r}")


@dataclass(frozen=True)
class RawPiecewiseUtility:
    """Possibly non-concave piecewise input for the envelope builder.

    Same partition convention as :class:`PiecewiseUtility`.  Cells may be
    discontinuous at breakpoints (the envelope of the graph is still well
    defined); ``report()`` lists such findings instead of failing.
    """

    breakpoints: tuple[float, ...]
    pieces: tuple

    def __post_init__(self):
        object.__setattr__(self, "breakpoints", tuple(float(b) for b in self.breakpoints))
        object.__setattr__(self, "pieces", tuple(self.pieces))
        if len(self.pieces) != len(self.breakpoints) + 1:
            raise ValueError(
                f"need exactly {len(self.breakpoints) + 1} pieces for "
                f"{len(self.breakpoints)} breakpoints, got {len(self.pieces)}"
            )

    @classmethod
    def from_piecewise(cls, utility: PiecewiseUtility) -> "RawPiecewiseUtility":
        return cls(utility.breakpoints, tuple(RawSahara(p) for p in utility.pieces))

    def value(self, x):
        xa = np.atleast_1d(np.asarray(x, dtype=float))
        idx = np.searchsorted(np.asarray(self.breakpoints), xa, side="right")
        out = np.empty_like(xa)
        for k, piece in enumerate(self.pieces):
            mask = idx == k
            if np.any(mask):
                out[mask] = np.atleast_1d(piece.value(xa[mask]))
        return float(out[0]) if np.isscalar(x) else out

    def cell_edges(self) -> list[tuple[float, float]]:
        edges = [-np.inf, *self.breakpoints, np.inf]
        return list(zip(edges[:-1], edges[1:]))

    def structure_errors(self) -> list[str]:
        """Violations that prevent envelope construction."""
        errors = []
        for k, piece in enumerate(self.pieces):
            errors.extend(f"piece {k}: {msg}" for msg in piece.validate())
        bps = np.asarray(self.breakpoints)
        if bps.size and not np.all(np.isfinite(bps)):
            errors.append("breakpoints must be finite")
        if bps.size > 1 and np.any(np.diff(bps) <= BREAKPOINT_MERGE_TOL):
            errors.append("breakpoints must be strictly increasing")
        for end, name in ((self.pieces[0], "leftmost"), (self.pieces[-1], "rightmost")):
            ok = isinstance(end, RawSahara) and not end.piece.is_affine and not end.piece.hara_limit
            if not ok:
                errors.append(
                    f"{name} piece must be a SAHARA member with alpha > 0 so the "
                    "envelope has coercive tails"
                )
        return errors

    def report(self) -> list[dict]:
        """Findings about the raw input: parameter errors and discontinuities."""
        findings = [{"type": "structure", "message": m} for m in self.structure_errors()]
        for k, a in enumerate(self.breakpoints):
            left = float(np.atleast_1d(self.pieces[k].value(a))[0])
            right = float(np.atleast_1d(self.pieces[k + 1].value(a))[0])
            scale = max(abs(left), abs(right), 1.0)
            finite = math.isfinite(left) and math.isfinite(right)
            if not finite or not (abs(left - right) <= 1e-10 * scale):
                findings.append(
                    {
                        "type": "discontinuity",
                        "at": a,
                        "left_value": left,
                        "right_value": right,
                    }
                )
        return findings

    def to_dict(self) -> dict:
        return {
            "breakpoints": list(self.breakpoints),
            "pieces": [p.to_dict() for p in self.pieces],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RawPiecewiseUtility":
        if not isinstance(data, dict):
            raise ValueError("utility document must be a JSON object")
        missing = {"breakpoints", "pieces"} - set(data)
        if missing:
            raise ValueError(f"utility document is missing fields: {sorted(missing)}")
        return cls(
            breakpoints=tuple(float(b) for b in data["breakpoints"]),
            pieces=tuple(_raw_piece_from_dict(p) for p in data["pieces"]),
        )


@dataclass(frozen=True)
class Bridge:
    """Affine span of the envelope strictly above the raw utility."""

    lower: float
    upper: float
    slope: float
    value_lower: float


@dataclass(frozen=True)
class EnvelopeResult:
    """Envelope utility together with where it departs from the raw input."""

    utility: PiecewiseUtility
    bridges: tuple[Bridge, ...]
    kinks: tuple[float, ...]
    raw: RawPiecewiseUtility

    def raw_value(self, x):
        return self.raw.value(x)


class _Sweep:
    def __init__(self, raw: RawPiecewiseUtility):
        self.raw = raw
        self.cells = raw.cell_edges()
        self.pieces = raw.pieces
        samples = []
        for (lo, hi), piece in zip(self.cells, self.pieces):
            for edge in (lo, hi):
                if math.isfinite(edge):
                    m = float(np.atleast_1d(piece.marginal(edge))[0])
                    if math.isfinite(m) and m > 0:
                        samples.append(m)
            if isinstance(piece, RawSahara) and piece.piece.is_affine:
                samples.append(piece.piece.gamma)
            if isinstance(piece, RawAffine) and piece.slope > 0:
                samples.append(piece.slope)
        if not samples:
            samples = [1.0]
        self.s_max = max(samples) * 1e8
        self.s_min = min(samples) * 1e-8

    def argmax(self, k: int, s: float) -> float:
        lo, hi = self.cells[k]
        return self.pieces[k].argmax_minus_linear(s, lo, hi)

    def conj(self, k: int, s: float) -> tuple[float, float]:
        x = self.argmax(k, s)
        v = float(np.atleast_1d(self.pieces[k].value(x))[0])
        return v - s * x, x

    def gap(self, i: int, j: int, s: float) -> float:
        return self.conj(i, s)[0] - self.conj(j, s)[0]

    def crossing(self, i: int, j: int, s_top: float) -> float | None:
        """Largest slope in (0, s_top] where cell j overtakes cell i."""
        hi = min(s_top, self.s_max)
        lo = self.s_min
        if hi <= lo:
            return None
        g_lo = self.gap(i, j, lo)
        scale = max(abs(self.conj(i, lo)[0]), abs(self.conj(j, lo)[0]), 1.0)
        if not g_lo < -TIE_REL_TOL * scale:
            return None  # j never strictly overtakes
        g_hi = self.gap(i, j, hi)
        if g_hi <= 0:
            return hi  # tied (or crossing) right at the entry slope
        grid = np.geomspace(lo, hi, SLOPE_GRID_POINTS)
        lo_b, hi_b = lo, hi
        for a, b in zip(grid[:-1], grid[1:]):
            if self.gap(i, j, b) > 0:
                lo_b, hi_b = a, b
                break
        root = brentq(lambda s: self.gap(i, j, s), lo_b, hi_b, xtol=1e-300, rtol=8.9e-16)
        # Newton polish on the tie equation; its slope is x_j - x_i
        for _ in range(3):
            g = self.gap(i, j, root)
            dx = self.conj(j, root)[1] - self.conj(i, root)[1]
            if dx <= 0 or not math.isfinite(g):
                break
            step = g / dx
            if not math.isfinite(step) or root - step <= 0:
                break
            root -= step
        return root


def concave_envelope(raw) -> EnvelopeResult:
    """Least concave majorant of a piecewise utility.

    Parameters
    ----------
    raw : PiecewiseUtility or RawPiecewiseUtility
        Input utility.  Leftmost and rightmost cells must be SAHARA members
        with positive alpha so that supporting lines of every positive slope
        exist.

    Returns
    -------
    EnvelopeResult
        The envelope as a strict piecewise utility, plus the bridges where
        it spans the raw graph and the kinks where it is not differentiable.
    """
    if isinstance(raw, PiecewiseUtility):
        raw_pw = RawPiecewiseUtility.from_piecewise(raw)
        if not raw.validate() and raw.is_concave_instance():
            return EnvelopeResult(
                utility=raw,
                bridges=(),
                kinks=tuple(raw.kinks()),
                raw=raw_pw,
            )
    elif isinstance(raw, RawPiecewiseUtility):
        raw_pw = raw
    else:
        raise TypeError(f"unsupported input type {type(raw).__name__}")

    errors = raw_pw.structure_errors()
    if errors:
        raise ValueError("cannot build envelope: " + "; ".join(errors))

    sweep = _Sweep(raw_pw)
    n = len(raw_pw.pieces)

    current = 0
    s_top = sweep.s_max
    junctions: list[tuple[float, float, float]] = []  # (x_leave, x_land, slope)
    order = [0]
    while current < n - 1:
        best_j, best_s = None, -np.inf
        for j in range(current + 1, n):
            s_c = sweep.crossing(current, j, s_top)
            if s_c is not None and s_c > best_s:
                best_j, best_s = j, s_c
        if best_j is None:
            raise ValueError(
                f"support sweep stalled at cell {current}: no rightward cell takes "
                "over within the searchable slope range; the input tails are not "
                "coercive enough"
            )
        _, x_leave = sweep.conj(current, best_s)
        _, x_land = sweep.conj(best_j, best_s)
        junctions.append((x_leave, x_land, best_s))
        order.append(best_j)
        current, s_top = best_j, best_s

    return _assemble(raw_pw, order, junctions)


def _assemble(raw: RawPiecewiseUtility, order: list[int], junctions) -> EnvelopeResult:
    breakpoints: list[float] = []
    pieces: list[UtilityPiece] = []
    bridges: list[Bridge] = []

    def push_breakpoint(x: float):
        if not breakpoints or x - breakpoints[-1] > JUNCTION_MERGE_TOL:
            breakpoints.append(x)
            return True
        return False

    def original_piece(idx: int) -> UtilityPiece:
        piece = raw.pieces[idx]
        if not isinstance(piece, RawSahara):
            raise AssertionError(
                f"cell {idx} of kind {piece.kind} appears in the envelope interior; "
                "only corner contact is possible for such cells"
            )
        return piece.piece

    # leftmost arc always starts the envelope
    pieces.append(original_piece(order[0]))
    for step, (x_leave, x_land, slope) in enumerate(junctions):
        landing = original_piece(order[step + 1])
        width_scale = max(1.0, abs(x_leave), abs(x_land))
        if x_land - x_leave > BRIDGE_MIN_WIDTH * width_scale:
            v_lower = float(np.atleast_1d(raw.pieces[order[step]].value(x_leave))[0])
            if push_breakpoint(x_leave):
                pieces.append(
                    UtilityPiece(alpha=0.0, beta=1.0, d=x_leave, gamma=slope, u=v_lower)
                )
            else:
                pieces[-1] = UtilityPiece(
                    alpha=0.0, beta=1.0, d=x_leave, gamma=slope, u=v_lower
                )
            bridges.append(Bridge(x_leave, x_land, slope, v_lower))
            if push_breakpoint(x_land):
                pieces.append(landing)
            else:
                pieces[-1] = landing
        else:
            if push_breakpoint(0.5 * (x_leave + x_land)):
                pieces.append(landing)
            else:
                pieces[-1] = landing

    utility = PiecewiseUtility(tuple(breakpoints), tuple(pieces))
    utility.validate_strict()
    return EnvelopeResult(
        utility=utility,
        bridges=tuple(bridges),
        kinks=tuple(utility.kinks()),
        raw=raw,
    )


def verify_envelope(
    result: EnvelopeResult,
    n_points: int = 200001,
    span: tuple[float, float] | None = None,
    rel_tol: float = 1e-9,
) -> dict:
    """Grid check of the envelope invariants against the raw input.

    Checks domination (envelope >= raw), coincidence off the bridges, and
    concavity of the envelope marginal along the grid.  Returns a report
    dict with the worst violations; ``passed`` summarizes them against
    ``rel_tol``.
    """
    env = result.utility
    if span is None:
        anchor = list(env.breakpoints) or [0.0]
        width = max(anchor[-1] - anchor[0], 1.0)
        span = (anchor[0] - 2.0 * width, anchor[-1] + 2.0 * width)
    xs = np.linspace(span[0], span[1], n_points)
    env_vals = env.value(xs)
    raw_vals = result.raw.value(xs)
    scale = np.maximum(1.0, np.abs(env_vals))

    domination_violation = float(np.max((raw_vals - env_vals) / scale))

    off_bridge = np.ones_like(xs, dtype=bool)
    for b in result.bridges:
        off_bridge &= ~((xs > b.lower + 1e-9) & (xs < b.upper - 1e-9))
    finite = np.isfinite(raw_vals)
    mask = off_bridge & finite
    coincidence_violation = float(
        np.max(np.abs(env_vals[mask] - raw_vals[mask]) / scale[mask])
    )

    marg = env.marginal(xs)
    marg_scale = np.maximum(np.abs(marg[:-1]), 1e-300)
    concavity_violation = float(np.max(np.diff(marg) / marg_scale))

    passed = (
        domination_violation <= rel_tol
        and coincidence_violation <= rel_tol
        and concavity_violation <= 1e-7
    )
    return {
        "span": [float(span[0]), float(span[1])],
        "n_points": n_points,
        "domination_violation": domination_violation,
        "coincidence_violation": coincidence_violation,
        "concavity_violation": concavity_violation,
        "bridges": [[b.lower, b.upper] for b in result.bridges],
        "kinks": list(result.kinks),
        "passed": bool(passed),
    }
