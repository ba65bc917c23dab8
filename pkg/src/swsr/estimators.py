"""Treatment-effect estimators for two-arm trials with a time-varying placebo.

Every estimator returns a :class:`FitResult` holding the estimate of the
additive treatment effect, its standard error, a one-sided p-value for
``H1: theta > 0`` and a two-sided 95% confidence interval. Test-only
methods (Wilcoxon) report ``nan`` for the estimate, SE and interval.
"""

from __future__ import annotations

import functools
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg
import scipy.special
from numpy.typing import ArrayLike, NDArray
from scipy.stats import rankdata

from .bspline import design_matrix, make_knot_vector
from .errors import (
    DegenerateResidualsError,
    EstimationError,
    InsufficientDataError,
    SingularDesignError,
)
from .linmodels import DesignSpec, _qr_solve, group_weights, ols_fit, wls_fit

__all__ = [
    "TrialData",
    "CandidateGrid",
    "FitResult",
    "DEFAULT_CANDIDATES",
    "swsr_fit",
    "welch_t",
    "wilcoxon",
    "slr_fit",
    "wlr_fit",
    "rr_fit",
    "huber_irls",
]

DEFAULT_CANDIDATES: tuple[tuple[int, int], ...] = ((1, 1), (1, 2), (5, 2), (5, 3))

HUBER_C = 1.345
MAD_CONST = 0.6745
HUBER_MAXIT = 50
HUBER_TOL = 1e-8
FOLD_RETRIES = 20


@dataclass(frozen=True)
class TrialData:
    """Observed responses ``y``, collection times ``t`` and arm indicator ``a``."""

    y: NDArray[np.float64]
    t: NDArray[np.float64]
    a: NDArray[np.int8]

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        t = np.asarray(self.t, dtype=float).ravel()
        a_raw = np.asarray(self.a).ravel()
        if not (y.shape == t.shape == a_raw.shape):
            raise ValueError(
                f"y, t, a lengths differ: {y.size}, {t.size}, {a_raw.size}"
            )
        if not np.all((a_raw == 0) | (a_raw == 1)):
            raise ValueError("treatment indicator a must be 0 or 1")
        a = a_raw.astype(np.int8)
        if a.sum() == 0 or a.sum() == a.size:
            raise ValueError("both arms must be nonempty")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(t))):
            raise ValueError("y and t must be finite")
        for name, arr in (("y", y), ("t", t), ("a", a)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return int(self.y.size)

    @property
    def n_t(self) -> int:
        return int(self.a.sum())

    @property
    def n_p(self) -> int:
        return self.n - self.n_t

    def arms(self) -> tuple[NDArray, NDArray]:
        """Return ``(placebo responses, treatment responses)``."""
        return self.y[self.a == 0], self.y[self.a == 1]


@dataclass(frozen=True)
class CandidateGrid:
    """Spline hyperparameters ``(k, d)`` scored by cross-validation."""

    candidates: tuple[tuple[int, int], ...] = DEFAULT_CANDIDATES
    folds: int = 5

    def __post_init__(self):
        cands = tuple((int(k), int(d)) for k, d in self.candidates)
        if not cands:
            raise ValueError("candidate grid is empty")
        if any(k < 0 or d < 0 for k, d in cands):
            raise ValueError(f"k and d must be non-negative: {cands}")
        if self.folds < 2:
            raise ValueError("need at least 2 folds")
        object.__setattr__(self, "candidates", cands)


@dataclass
class FitResult:
    theta_hat: float
    se: float
    p_one_sided: float
    ci95: tuple[float, float]
    method: str
    diagnostics: dict = field(default_factory=dict)

    @property
    def has_estimate(self) -> bool:
        return not math.isnan(self.theta_hat)

    def rejects(self, alpha: float = 0.025) -> bool:
        return self.p_one_sided < alpha

    def covers(self, theta: float) -> bool:
        lo, hi = self.ci95
        return bool(lo <= theta <= hi)


_NAN_CI = (math.nan, math.nan)


def _t_result(theta: float, se: float, df: float, method: str, **diag) -> FitResult:
    """t-based one-sided p-value and symmetric 95% interval."""
    if se > 0:
        stat = theta / se
        p = float(scipy.special.stdtr(df, -stat))
    else:
        stat = math.copysign(math.inf, theta) if theta else 0.0
        p = 0.0 if theta > 0 else (1.0 if theta < 0 else 0.5)
    q = float(scipy.special.stdtrit(df, 0.975))
    diag.update(df=df, statistic=stat, reference="t")
    return FitResult(
        theta_hat=float(theta),
        se=float(se),
        p_one_sided=p,
        ci95=(theta - q * se, theta + q * se),
        method=method,
        diagnostics=diag,
    )


# ---------------------------------------------------------------------------
# two-sample tests


def welch_t(data: TrialData) -> FitResult:
    """Welch's unequal-variance t-test of treatment minus placebo means."""
    yp, yt = data.arms()
    if yp.size < 2 or yt.size < 2:
        raise InsufficientDataError("Welch's t-test needs >= 2 observations per arm")
    vp = np.var(yp, ddof=1) / yp.size
    vt = np.var(yt, ddof=1) / yt.size
    theta = float(yt.mean() - yp.mean())
    v = vp + vt
    if v > 0:
        df = v**2 / (vp**2 / (yp.size - 1) + vt**2 / (yt.size - 1))
    else:
        df = float(data.n - 2)
    return _t_result(theta, math.sqrt(v), df, "WTT")


@functools.lru_cache(maxsize=64)
def _rank_sum_upper_tail(n: int, m: int) -> NDArray:
    """Exact null tail ``P(W >= w)`` of the rank sum of ``m`` of ``n`` ranks.

    Indexed by ``w``; counts subsets by dynamic programming.
    """
    max_sum = sum(range(n - m + 1, n + 1))
    # counts[j, s]: number of j-subsets of the ranks seen so far with sum s
    counts = np.zeros((m + 1, max_sum + 1), dtype=float)
    counts[0, 0] = 1.0
    for r in range(1, n + 1):
        for j in range(min(r, m), 0, -1):
            counts[j, r:] += counts[j - 1, : max_sum + 1 - r]
    dist = counts[m] / math.comb(n, m)
    return np.cumsum(dist[::-1])[::-1]


def wilcoxon(data: TrialData) -> FitResult:
    """Wilcoxon rank-sum test oriented as the treatment-arm rank sum.

    Without ties and with both arms smaller than 50 the exact null
    distribution is used; otherwise a normal approximation with
    tie-corrected variance and a continuity correction of 1/2 towards the
    null mean.
    """
    ranks = rankdata(data.y)
    n, m = data.n, data.n_t
    w = float(ranks[data.a == 1].sum())
    mean = m * (n + 1) / 2.0
    _, tie_counts = np.unique(data.y, return_counts=True)
    has_ties = bool(np.any(tie_counts > 1))
    if not has_ties and data.n_p < 50 and m < 50:
        tail = _rank_sum_upper_tail(n, m)
        p = float(tail[int(round(w))])
        return FitResult(
            math.nan, math.nan, min(p, 1.0), _NAN_CI, "WT",
            {"statistic": w, "exact": True},
        )
    tie_term = float(np.sum(tie_counts**3 - tie_counts)) / (n * (n - 1))
    var = m * data.n_p / 12.0 * ((n + 1) - tie_term)
    if var <= 0:
        return FitResult(
            math.nan, math.nan, 1.0, _NAN_CI, "WT",
            {"statistic": w, "exact": False, "degenerate": True},
        )
    dev = w - mean
    z = math.copysign(max(abs(dev) - 0.5, 0.0), dev) / math.sqrt(var)
    p = float(scipy.special.ndtr(-z))
    return FitResult(
        math.nan, math.nan, p, _NAN_CI, "WT", {"statistic": w, "z": z, "exact": False}
    )


# ---------------------------------------------------------------------------
# parametric regressions with a linear time trend


def _linear_design(data: TrialData) -> DesignSpec:
    if data.n < 4:
        raise InsufficientDataError("linear-trend regressions need N >= 4")
    return DesignSpec(
        matrix=np.column_stack([np.ones(data.n), data.t, data.a]),
        columns=("intercept", "time", "treatment"),
        treatment_col=2,
    )


def slr_fit(data: TrialData) -> FitResult:
    """OLS on intercept, time and treatment."""
    X = _linear_design(data)
    fit = ols_fit(X, data.y)
    j = X.treatment_col
    return _t_result(fit.coefficients[j], fit.se[j], fit.dof, "SLR")


def wlr_fit(data: TrialData) -> FitResult:
    """OLS, then WLS with inverse per-arm residual MSE weights."""
    X = _linear_design(data)
    first = ols_fit(X, data.y)
    gw = group_weights(first.residuals, data.a)
    fit = wls_fit(X, data.y, gw)
    j = X.treatment_col
    return _t_result(
        fit.coefficients[j], fit.se[j], fit.dof, "WLR", group_mse=gw.group_mse
    )


def huber_irls(
    X: NDArray,
    y: NDArray,
    c: float = HUBER_C,
    maxit: int = HUBER_MAXIT,
    tol: float = HUBER_TOL,
):
    """Huber M-estimation by iteratively reweighted least squares.

    The scale is re-estimated every iteration as ``median(|r|) / 0.6745``.
    The covariance is Huber's asymptotic form with small-sample correction
    ``kappa``::

        kappa**2 * s**2 * sum(psi(u)**2) / (n - p) / mean(psi'(u))**2 * inv(X'X)

    Returns
    -------
    beta, cov, scale, n_iter, converged
    """
    n, p = X.shape
    beta, _ = _qr_solve(X, y)
    converged = False
    it = 0
    for it in range(1, maxit + 1):
        r = y - X @ beta
        s = float(np.median(np.abs(r))) / MAD_CONST
        if s <= 0:
            raise DegenerateResidualsError("MAD scale of residuals is zero")
        u = np.abs(r) / s
        w = np.minimum(1.0, c / np.maximum(u, np.finfo(float).tiny))
        sw = np.sqrt(w)
        new, _ = _qr_solve(X * sw[:, None], y * sw)
        step = float(np.max(np.abs(new - beta)))
        beta = new
        if step < tol:
            converged = True
            break
    r = y - X @ beta
    s = float(np.median(np.abs(r))) / MAD_CONST
    if s <= 0:
        raise DegenerateResidualsError("MAD scale of residuals is zero")
    u = r / s
    psi = np.clip(u, -c, c)
    dpsi = (np.abs(u) <= c).astype(float)
    mn = dpsi.mean()
    if mn == 0:
        raise DegenerateResidualsError("all residuals beyond the Huber threshold")
    kappa = 1.0 + p * np.var(dpsi, ddof=1) / (n * mn**2)
    sigma2 = (s**2) * np.sum(psi**2) / (n - p) * (kappa / mn) ** 2
    _, R = np.linalg.qr(X)
    Rinv = np.linalg.inv(R)
    cov = sigma2 * (Rinv @ Rinv.T)
    return beta, 0.5 * (cov + cov.T), s, it, converged


def rr_fit(data: TrialData) -> FitResult:
    """Huber robust regression on intercept, time and treatment."""
    X = _linear_design(data)
    beta, cov, scale, n_iter, converged = huber_irls(X.matrix, data.y)
    j = X.treatment_col
    diag = {"scale": scale, "iterations": n_iter, "converged": converged}
    if not converged:
        warnings.warn("Huber IRLS did not converge", RuntimeWarning, stacklevel=2)
    return _t_result(beta[j], math.sqrt(cov[j, j]), data.n - 3, "RR", **diag)


# ---------------------------------------------------------------------------
# SWSR


@functools.lru_cache(maxsize=128)
def _cached_basis(t_bytes: bytes, k: int, d: int) -> NDArray:
    t = np.frombuffer(t_bytes, dtype=float)
    return design_matrix(t, make_knot_vector(t, k, d)).values


def spline_design(t: NDArray, a: NDArray, k: int, d: int) -> NDArray:
    """``[B_1(t) ... B_{k+d+1}(t), a]`` with knots from the quantiles of ``t``."""
    t = np.ascontiguousarray(t, dtype=float)
    B = _cached_basis(t.tobytes(), k, d)
    return np.column_stack([B, a])


def _draw_folds(a: NDArray, n_folds: int, rng: np.random.Generator) -> tuple[NDArray, str]:
    """Random near-equal partition whose training sets all contain both arms.

    Falls back to a partition stratified by arm after ``FOLD_RETRIES`` draws.
    """
    n = a.size
    base = np.arange(n) % n_folds
    for _ in range(FOLD_RETRIES):
        folds = np.empty(n, dtype=np.intp)
        folds[rng.permutation(n)] = base
        if _folds_ok(a, folds, n_folds):
            return folds, "random"
    folds = np.empty(n, dtype=np.intp)
    for arm in (0, 1):
        idx = np.flatnonzero(a == arm)
        folds[rng.permutation(idx)] = np.arange(idx.size) % n_folds
    return folds, "stratified"


def _folds_ok(a: NDArray, folds: NDArray, n_folds: int) -> bool:
    for v in range(n_folds):
        train = a[folds != v]
        if train.size == 0 or train.min() == train.max():
            return False
    return True


def _weights_or_unit(resid: NDArray, a: NDArray) -> tuple[NDArray, dict | None]:
    """Inverse per-arm MSE weights; unit weights when an arm fits exactly."""
    treated = a == 1
    r2 = resid * resid
    mse = {"p": float(r2[~treated].mean()), "t": float(r2[treated].mean())}
    if not (mse["p"] > 0 and mse["t"] > 0) or not all(np.isfinite(1.0 / v) for v in mse.values()):
        # exact fit: any positive weights give the same solution
        return np.ones_like(resid), None
    return np.where(treated, 1.0 / mse["t"], 1.0 / mse["p"]), mse


def _weighted_fit(X: NDArray, y: NDArray, w: NDArray):
    sw = np.sqrt(w)
    return _qr_solve(X * sw[:, None], y * sw)


def _fold_splits(folds: NDArray, n_folds: int) -> list[tuple[NDArray, NDArray]]:
    return [(np.flatnonzero(folds != v), np.flatnonzero(folds == v)) for v in range(n_folds)]


def _cv_score(
    X: NDArray,
    y: NDArray,
    a: NDArray,
    splits: list[tuple[NDArray, NDArray]],
    w_full: NDArray,
    weights_scope: str,
) -> float:
    """Mean over folds of the unweighted validation MSE of a weighted fit."""
    mses = np.empty(len(splits))
    for v, (train, val) in enumerate(splits):
        Xt, yt = X[train], y[train]
        if weights_scope == "full":
            w = w_full[train]
        else:
            beta0, _ = _qr_solve(Xt, yt)
            w, _ = _weights_or_unit(yt - Xt @ beta0, a[train])
        beta, _ = _weighted_fit(Xt, yt, w)
        err = y[val] - X[val] @ beta
        mses[v] = float(err @ err) / err.size
    return float(mses.mean())


def _swsr_final(X: NDArray, y: NDArray, a: NDArray):
    """Unweighted fit, arm weights, weighted fit; treatment is the last column."""
    n, p = X.shape
    beta0, _ = _qr_solve(X, y)
    w, mse = _weights_or_unit(y - X @ beta0, a)
    beta, R = _weighted_fit(X, y, w)
    r = y - X @ beta
    sigma2 = float(np.sum(w * r**2)) / (n - p)
    # last diagonal entry of inv(R'R) is 1 / R[p, p]**2
    var_theta = sigma2 / R[-1, -1] ** 2
    return beta[-1], math.sqrt(var_theta), n - p, mse


def swsr_fit(
    data: TrialData,
    grid: CandidateGrid | Iterable[tuple[int, int]] | None = None,
    rng: np.random.Generator | int | None = None,
    *,
    folds: ArrayLike | None = None,
    weights_scope: str = "full",
    method: str = "SWSR",
) -> FitResult:
    """Semiparametric weighted spline regression.

    Cross-validation picks the spline ``(k, d)``: per candidate, an
    unweighted spline fit on all data gives per-arm weights, each training
    fold is refitted by weighted least squares with those weights and
    scored by the unweighted validation MSE. The winning candidate is
    refitted on all data (unweighted fit, weights, weighted fit) and the
    treatment coefficient is tested against a t distribution with
    ``N - p`` degrees of freedom.

    Parameters
    ----------
    data : TrialData
    grid : CandidateGrid or iterable of (k, d), optional
        Defaults to ``(1, 1), (1, 2), (5, 2), (5, 3)`` with 5 folds. A
        single candidate skips cross-validation.
    rng : Generator or int, optional
        Source of the fold assignment.
    folds : array_like, optional
        Explicit fold label per observation (``0 .. n_folds-1``); overrides
        ``rng``.
    weights_scope : {"full", "fold"}
        Where the cross-validation weights come from: the all-data
        unweighted fit (default) or an unweighted fit on each training set.
    """
    if grid is None:
        grid = CandidateGrid()
    elif not isinstance(grid, CandidateGrid):
        grid = CandidateGrid(candidates=tuple(grid))
    if weights_scope not in ("full", "fold"):
        raise ValueError(f"weights_scope must be 'full' or 'fold', got {weights_scope!r}")
    y, t, a = data.y, data.t, data.a.astype(float)
    n_folds = grid.folds

    designs: dict[tuple[int, int], NDArray] = {}
    skipped: dict[tuple[int, int], str] = {}
    for cand in grid.candidates:
        try:
            designs[cand] = spline_design(t, a, *cand)
        except (SingularDesignError, ValueError) as exc:
            skipped[cand] = str(exc)

    cv_table: dict[tuple[int, int], float] = {}
    fold_scheme = None
    if len(grid.candidates) == 1:
        selected = grid.candidates[0]
        if selected in skipped:
            raise EstimationError(f"candidate {selected} unusable: {skipped[selected]}")
    else:
        if folds is None:
            if not isinstance(rng, np.random.Generator):
                rng = np.random.default_rng(rng)
            fold_ids, fold_scheme = _draw_folds(data.a, n_folds, rng)
        else:
            fold_ids = np.asarray(folds, dtype=np.intp).ravel()
            if fold_ids.shape != y.shape or fold_ids.min() < 0 or fold_ids.max() >= n_folds:
                raise ValueError("folds must label every observation with 0..n_folds-1")
            fold_scheme = "given"
        splits = _fold_splits(fold_ids, n_folds)
        for cand, X in designs.items():
            try:
                beta0, _ = _qr_solve(X, y)
                w_full, _ = _weights_or_unit(y - X @ beta0, data.a)
                cv_table[cand] = _cv_score(X, y, data.a, splits, w_full, weights_scope)
            except (SingularDesignError, InsufficientDataError) as exc:
                skipped[cand] = str(exc)
        if skipped:
            warnings.warn(
                f"skipped SWSR candidates {sorted(skipped)}", RuntimeWarning, stacklevel=2
            )
        if not cv_table:
            raise EstimationError("every SWSR candidate failed: " + "; ".join(skipped.values()))
        # first minimizer in grid order
        selected = min(cv_table, key=lambda c: (cv_table[c], grid.candidates.index(c)))

    X = designs[selected]
    try:
        theta, se, df, mse = _swsr_final(X, y, data.a)
    except (SingularDesignError, InsufficientDataError) as exc:
        raise EstimationError(f"final SWSR fit failed for {selected}: {exc}") from exc
    return _t_result(
        theta,
        se,
        df,
        method,
        selected=selected,
        cv_mse=cv_table,
        skipped=skipped,
        fold_scheme=fold_scheme,
        group_mse=mse,
        weights_scope=weights_scope,
    )
