"""Clamped B-spline bases on quantile knots.

Knots are placed at empirical quantiles of the observed times and the
boundary knots are repeated ``degree + 1`` times, so a spline with ``k``
interior knots and degree ``d`` has ``k + d + 1`` basis functions that form
a partition of unity on ``[lo, hi]``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import DegenerateDomainError, DomainError

__all__ = [
    "KnotVector",
    "BasisMatrix",
    "make_knot_vector",
    "basis_value",
    "design_matrix",
]


@dataclass(frozen=True)
class KnotVector:
    """Interior knots, boundary knots and degree of a clamped B-spline basis."""

    interior: NDArray[np.float64]
    boundary_lo: float
    boundary_hi: float
    degree: int
    full: NDArray[np.float64] = field(init=False, repr=False)

    def __post_init__(self):
        interior = np.asarray(self.interior, dtype=float).copy()
        interior.setflags(write=False)
        object.__setattr__(self, "interior", interior)
        if self.degree < 0:
            raise ValueError(f"degree must be >= 0, got {self.degree}")
        if not self.boundary_lo < self.boundary_hi:
            raise DegenerateDomainError(
                f"boundary knots must satisfy lo < hi, got "
                f"[{self.boundary_lo}, {self.boundary_hi}]"
            )
        if np.any(np.diff(interior) < 0):
            raise ValueError("interior knots must be nondecreasing")
        if interior.size and (
            interior[0] < self.boundary_lo or interior[-1] > self.boundary_hi
        ):
            raise ValueError("interior knots must lie within the boundary knots")
        pad = self.degree + 1
        full = np.concatenate(
            [
                np.full(pad, float(self.boundary_lo)),
                interior,
                np.full(pad, float(self.boundary_hi)),
            ]
        )
        full.setflags(write=False)
        object.__setattr__(self, "full", full)

    @property
    def k(self) -> int:
        return int(self.interior.size)

    @property
    def n_basis(self) -> int:
        return self.k + self.degree + 1


@dataclass(frozen=True)
class BasisMatrix:
    """Basis functions evaluated at a set of times (one row per time)."""

    values: NDArray[np.float64]
    times: NDArray[np.float64]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def make_knot_vector(times: ArrayLike, k: int, d: int) -> KnotVector:
    """Place ``k`` interior knots at the ``j/(k+1)`` quantiles of ``times``.

    Quantiles use linear interpolation between order statistics (numpy's
    default, R's type 7). Tied quantiles are collapsed to unique values and
    knots that coincide with a boundary are dropped, with a warning, so the
    effective number of interior knots may be smaller than ``k``.

    Parameters
    ----------
    times : array_like
        Observed times. At least two distinct values are required.
    k : int
        Requested number of interior knots.
    d : int
        Spline degree.

    Returns
    -------
    KnotVector
    """
    if k < 0 or d < 0:
        raise ValueError(f"k and d must be non-negative, got k={k}, d={d}")
    t = np.asarray(times, dtype=float).ravel()
    if t.size == 0:
        raise DegenerateDomainError("no time values supplied")
    if not np.all(np.isfinite(t)):
        raise ValueError("time values must be finite")
    lo, hi = float(t.min()), float(t.max())
    if lo == hi:
        raise DegenerateDomainError("time values need at least 2 distinct values")

    if k == 0:
        interior = np.empty(0)
    else:
        probs = np.arange(1, k + 1) / (k + 1)
        raw = np.quantile(t, probs)
        interior = np.unique(raw)
        interior = interior[(interior > lo) & (interior < hi)]
        if interior.size < k:
            warnings.warn(
                f"tied knot quantiles: using {interior.size} unique interior "
                f"knots instead of {k}",
                RuntimeWarning,
                stacklevel=2,
            )
    return KnotVector(interior=interior, boundary_lo=lo, boundary_hi=hi, degree=d)


def _last_span(full: NDArray) -> int:
    # index i of the last nonempty interval [full[i], full[i+1])
    return int(np.flatnonzero(full[:-1] < full[1:])[-1])


def _ratio(num, den):
    """num/den with the Cox-de Boor convention 0/0 := 0 (den is a knot gap)."""
    if den == 0.0:
        return 0.0
    return num / den


def _cox_de_boor(full: NDArray, i: int, p: int, t: float, last: int) -> float:
    if p == 0:
        if full[i] <= t < full[i + 1]:
            return 1.0
        # closed last interval so the right boundary is covered
        return 1.0 if (i == last and t == full[i + 1]) else 0.0
    left = _ratio(t - full[i], full[i + p] - full[i])
    right = _ratio(full[i + p + 1] - t, full[i + p + 1] - full[i + 1])
    value = 0.0
    if left:
        value += left * _cox_de_boor(full, i, p - 1, t, last)
    if right:
        value += right * _cox_de_boor(full, i + 1, p - 1, t, last)
    return value


def basis_value(knots: KnotVector, j: int, t: float) -> float:
    """Evaluate the ``j``-th basis function (1-based) at ``t`` by recursion.

    Raises ``IndexError`` when ``j`` is outside ``1..n_basis`` and
    ``DomainError`` when ``t`` is outside the boundary knots.
    """
    if not 1 <= j <= knots.n_basis:
        raise IndexError(f"basis index {j} outside 1..{knots.n_basis}")
    t = float(t)
    if not knots.boundary_lo <= t <= knots.boundary_hi:
        raise DomainError(
            f"t={t} outside [{knots.boundary_lo}, {knots.boundary_hi}]"
        )
    full = knots.full
    return _cox_de_boor(full, j - 1, knots.degree, t, _last_span(full))


def design_matrix(times: ArrayLike, knots: KnotVector) -> BasisMatrix:
    """Evaluate all basis functions at ``times``.

    Uses the triangular Cox-de Boor scheme on the whole vector of times at
    once, raising the degree from 0 to ``knots.degree``.
    """
    t = np.asarray(times, dtype=float).ravel()
    outside = (t < knots.boundary_lo) | (t > knots.boundary_hi) | ~np.isfinite(t)
    if np.any(outside):
        bad = t[outside][0]
        raise DomainError(
            f"{int(outside.sum())} time(s) outside "
            f"[{knots.boundary_lo}, {knots.boundary_hi}], e.g. t={bad}"
        )
    full = knots.full
    tt = t[:, None]
    B = ((full[:-1] <= tt) & (tt < full[1:])).astype(float)
    B[t == knots.boundary_hi, _last_span(full)] = 1.0

    for p in range(1, knots.degree + 1):
        n = full.size - p - 1
        left_gap = full[p : p + n] - full[:n]
        right_gap = full[p + 1 : p + 1 + n] - full[1 : 1 + n]
        with np.errstate(divide="ignore", invalid="ignore"):
            left = np.where(left_gap > 0, (tt - full[:n]) / left_gap, 0.0)
            right = np.where(
                right_gap > 0, (full[p + 1 : p + 1 + n] - tt) / right_gap, 0.0
            )
        B = left * B[:, :n] + right * B[:, 1 : n + 1]

    values = np.clip(B, 0.0, 1.0)
    values.setflags(write=False)
    return BasisMatrix(values=values, times=t)
