"""Ordinary and weighted least squares with model-based coefficient covariance.

Fits go through a QR factorization of the (row-scaled) design matrix. The
weighted covariance is ``sigma2_hat * inv(X' W X)`` with
``sigma2_hat = sum(w * r**2) / (N - p)``, so multiplying every weight by a
constant changes neither the coefficients nor the covariance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg
import scipy.linalg.lapack
from numpy.typing import ArrayLike, NDArray

from .errors import DegenerateResidualsError, InsufficientDataError, SingularDesignError

__all__ = [
    "DesignSpec",
    "LinearFit",
    "GroupWeights",
    "ols_fit",
    "wls_fit",
    "group_weights",
    "RANK_TOL",
]

# relative threshold on |diag(R)| below which a column is declared dependent
RANK_TOL = 1e-10


@dataclass(frozen=True)
class DesignSpec:
    """Design matrix together with the role of each column.

    ``columns`` holds labels such as ``"intercept"``, ``"time"``,
    ``"spline[3]"`` or ``"treatment"``.
    """

    matrix: NDArray[np.float64]
    columns: tuple[str, ...] = ()
    treatment_col: int | None = None

    def __post_init__(self):
        X = np.asarray(self.matrix, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2 or X.shape[1] < 1:
            raise ValueError(f"design matrix must be 2-D with p >= 1, got {X.shape}")
        object.__setattr__(self, "matrix", X)
        cols = tuple(self.columns) or tuple(f"x{j}" for j in range(X.shape[1]))
        if len(cols) != X.shape[1]:
            raise ValueError(
                f"{len(cols)} column labels for a matrix with {X.shape[1]} columns"
            )
        object.__setattr__(self, "columns", cols)
        if self.treatment_col is not None and not 0 <= self.treatment_col < X.shape[1]:
            raise IndexError(f"treatment_col {self.treatment_col} out of range")
        zero = np.flatnonzero(~np.any(X != 0.0, axis=0))
        if zero.size:
            raise SingularDesignError(
                "all-zero design column(s): " + ", ".join(cols[j] for j in zero),
                columns=[cols[j] for j in zero],
            )

    @property
    def n_obs(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_params(self) -> int:
        return self.matrix.shape[1]

    @classmethod
    def from_columns(cls, named: Mapping[str, ArrayLike], treatment: str | None = None):
        names = list(named)
        X = np.column_stack([np.asarray(named[n], dtype=float) for n in names])
        tcol = names.index(treatment) if treatment is not None else None
        return cls(matrix=X, columns=tuple(names), treatment_col=tcol)


@dataclass(frozen=True)
class LinearFit:
    coefficients: NDArray[np.float64]
    covariance: NDArray[np.float64]
    residuals: NDArray[np.float64]
    dof: int
    sigma2_hat: float
    columns: tuple[str, ...] = ()

    @property
    def se(self) -> NDArray[np.float64]:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    def coef(self, name: str) -> float:
        return float(self.coefficients[self.columns.index(name)])


@dataclass(frozen=True)
class GroupWeights:
    """Inverse group-MSE weights, one per observation."""

    w: NDArray[np.float64]
    group_mse: dict = field(default_factory=dict)


def _as_design(X) -> DesignSpec:
    return X if isinstance(X, DesignSpec) else DesignSpec(matrix=X)


_geqrf, _trtrs = scipy.linalg.lapack.get_lapack_funcs(("geqrf", "trtrs"), dtype=np.float64)


def _qr_solve(Xs: NDArray, ys: NDArray, columns: Sequence[str] | None = None):
    """Least squares on pre-scaled data via Householder QR.

    ``[Xs, ys]`` is factorized in one pass, so ``Q' ys`` is read off the
    last column of the triangular factor and ``Q`` is never formed.

    Returns ``(beta, R)``; raises ``SingularDesignError`` when a diagonal
    entry of ``R`` falls below ``RANK_TOL`` times the largest one.
    """
    n, p = Xs.shape
    if n <= p:
        raise InsufficientDataError(f"need N > p, got N={n}, p={p}")
    aug = np.empty((n, p + 1), order="F")
    aug[:, :p] = Xs
    aug[:, p] = ys
    qr, _, _, info = _geqrf(aug, overwrite_a=1)
    if info != 0:
        raise np.linalg.LinAlgError(f"geqrf failed with info={info}")
    R = np.triu(qr[:p, :p])
    diag = np.abs(np.diag(R))
    top = diag.max()
    bad = np.flatnonzero(diag <= RANK_TOL * top) if top > 0 else np.arange(p)
    if bad.size:
        names = [columns[j] if columns else f"x{j}" for j in bad]
        raise SingularDesignError(
            "design is rank deficient; dependent column(s): " + ", ".join(names),
            columns=names,
        )
    beta, info = _trtrs(R, qr[:p, p])
    if info != 0:
        raise np.linalg.LinAlgError(f"trtrs failed with info={info}")
    return beta, R


def _covariance_from_r(R: NDArray, sigma2: float) -> NDArray:
    Rinv = scipy.linalg.solve_triangular(R, np.eye(R.shape[0]), check_finite=False)
    cov = sigma2 * (Rinv @ Rinv.T)
    return 0.5 * (cov + cov.T)


def _fit(X: DesignSpec, y: NDArray, w: NDArray | None) -> LinearFit:
    M = X.matrix
    y = np.asarray(y, dtype=float).ravel()
    if y.shape[0] != M.shape[0]:
        raise ValueError(f"y has {y.shape[0]} entries, design has {M.shape[0]} rows")
    if w is None:
        beta, R = _qr_solve(M, y, X.columns)
        resid = y - M @ beta
        rss = float(resid @ resid)
    else:
        sw = np.sqrt(w)
        beta, R = _qr_solve(M * sw[:, None], y * sw, X.columns)
        resid = y - M @ beta
        rss = float(np.sum(w * resid**2))
    n, p = M.shape
    dof = n - p
    sigma2 = rss / dof
    return LinearFit(
        coefficients=beta,
        covariance=_covariance_from_r(R, sigma2),
        residuals=resid,
        dof=dof,
        sigma2_hat=sigma2,
        columns=X.columns,
    )


def ols_fit(X, y: ArrayLike) -> LinearFit:
    """Ordinary least squares.

    Parameters
    ----------
    X : DesignSpec or array_like
        N x p design matrix.
    y : array_like
        Responses.

    Returns
    -------
    LinearFit
        ``sigma2_hat = RSS / (N - p)`` and covariance
        ``sigma2_hat * inv(X'X)``.
    """
    return _fit(_as_design(X), y, None)


def wls_fit(X, y: ArrayLike, w) -> LinearFit:
    """Weighted least squares minimizing ``sum(w_i * (y_i - x_i' b)**2)``.

    ``w`` may be a :class:`GroupWeights` or a plain vector of positive
    weights.
    """
    X = _as_design(X)
    wv = np.asarray(w.w if isinstance(w, GroupWeights) else w, dtype=float).ravel()
    if wv.shape[0] != X.n_obs:
        raise ValueError(f"{wv.shape[0]} weights for {X.n_obs} observations")
    if not np.all(np.isfinite(wv)) or np.any(wv <= 0):
        raise ValueError("weights must be finite and strictly positive")
    return _fit(X, y, wv)


def _group_labels(groups: ArrayLike) -> NDArray:
    g = np.asarray(groups)
    if g.dtype.kind in "biuf":
        if not np.all((g == 0) | (g == 1)):
            raise ValueError("numeric group labels must be 0 (placebo) or 1 (treatment)")
        return np.where(g == 1, "t", "p")
    g = g.astype(str)
    if not np.all((g == "p") | (g == "t")):
        raise ValueError("group labels must be 'p' or 't'")
    return g


def group_weights(residuals: ArrayLike, groups: ArrayLike) -> GroupWeights:
    """Weights equal to the inverse mean squared residual of each arm.

    ``groups`` holds ``'p'``/``'t'`` labels or the 0/1 treatment indicator.
    """
    r = np.asarray(residuals, dtype=float).ravel()
    g = _group_labels(groups)
    if g.shape != r.shape:
        raise ValueError("residuals and groups must have the same length")
    mse = {}
    w = np.empty_like(r)
    for label in ("p", "t"):
        mask = g == label
        if not mask.any():
            raise ValueError(f"group '{label}' is empty")
        m = float(np.mean(r[mask] ** 2))
        inv = 1.0 / m if m > 0 else np.inf
        if not np.isfinite(inv):
            raise DegenerateResidualsError(
                f"mean squared residual of group '{label}' is zero"
            )
        mse[label] = m
        w[mask] = inv
    return GroupWeights(w=w, group_mse=mse)
