"""Scenario definitions, trial generation and Monte Carlo evaluation.

Every simulated trial ``i`` draws from ``SeedSequence(master_seed,
spawn_key=(i,))``, split into independent streams for the drift, the trial
(assignment and noise) and each method. Results are therefore identical
however iterations are distributed over worker processes.
"""

from __future__ import annotations

import math
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .bspline import design_matrix, make_knot_vector
from .errors import DriftStateError, SWSRError
from .estimators import (
    CandidateGrid,
    FitResult,
    TrialData,
    rr_fit,
    slr_fit,
    swsr_fit,
    welch_t,
    wilcoxon,
    wlr_fit,
)
from .linmodels import ols_fit
from .randtest import PermutationPlan, rand_tests

__all__ = [
    "DriftFunction",
    "ScenarioSpec",
    "MethodSummary",
    "CellReport",
    "Figure1Result",
    "METHOD_NAMES",
    "drift_eval",
    "generate_trial",
    "paper_scenario",
    "run_method",
    "run_cell",
    "figure1_demo",
]

DRIFT_FAMILIES = (
    "zero",
    "linear-ramp",
    "random-walk",
    "poly-case-1",
    "poly-case-2",
    "poly-case-3",
    "figure1-demo",
)

METHOD_NAMES = (
    "WTT", "WT", "SLR", "WLR", "RR", "RT(T)", "RT(W)", "SWSR", "SWSR(S)", "SWSR(C)",
)
TABLE_METHODS = METHOD_NAMES[:8]
SIMPLE_SPLINE = (1, 1)
COMPLEX_SPLINE = (100, 3)


# ---------------------------------------------------------------------------
# drift functions


@dataclass(frozen=True)
class DriftFunction:
    """Placebo mean as a function of time.

    ``params`` by family:

    * ``linear-ramp``: ``amplitude``, ``t_start``, ``t_end``; the ramp rises
      from 0 at ``t_start`` to ``amplitude`` at ``t_end``.
    * ``random-walk``: ``var`` and ``scale`` (``"variance"`` or ``"sd"``,
      how ``var`` is read). Needs :meth:`realize` before evaluation.
    """

    family: str
    params: dict = field(default_factory=dict)
    increments: NDArray[np.float64] | None = None

    def __post_init__(self):
        if self.family not in DRIFT_FAMILIES:
            raise ValueError(f"unknown drift family {self.family!r}")
        if self.family == "random-walk":
            if not self.params.get("var", 0) > 0:
                raise ValueError("random-walk drift needs var > 0")
            if self.params.get("scale", "variance") not in ("variance", "sd"):
                raise ValueError("random-walk scale must be 'variance' or 'sd'")

    @property
    def is_random(self) -> bool:
        return self.family == "random-walk"

    @property
    def increment_sd(self) -> float:
        v = float(self.params["var"])
        return math.sqrt(v) if self.params.get("scale", "variance") == "variance" else v

    def realize(self, rng: np.random.Generator | int | None, horizon: int) -> "DriftFunction":
        """Draw the ``horizon`` increments of a random walk (no-op otherwise)."""
        if not self.is_random:
            return self
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        eta = rng.normal(0.0, self.increment_sd, size=int(horizon))
        eta.setflags(write=False)
        return replace(self, increments=eta)


def drift_eval(drift: DriftFunction, t: ArrayLike):
    """Evaluate ``f(t)``; returns a float for scalar ``t``, else an array."""
    tt = np.asarray(t, dtype=float)
    fam, p = drift.family, drift.params
    if fam == "zero":
        out = np.zeros_like(tt)
    elif fam == "linear-ramp":
        t0, t1 = p["t_start"], p["t_end"]
        out = p.get("amplitude", 0.3) * (tt - t0) / (t1 - t0)
    elif fam == "random-walk":
        if drift.increments is None:
            raise DriftStateError("random-walk drift evaluated before realize()")
        steps = np.floor(tt).astype(np.int64)
        if np.any(steps < 0) or np.any(steps > drift.increments.size):
            raise ValueError(
                f"random walk realized for t in [0, {drift.increments.size + 1}) only"
            )
        partial = np.concatenate([[0.0], np.cumsum(drift.increments)])
        out = partial[steps]
    elif fam == "poly-case-1":
        out = 0.36 - 0.021 * tt + 0.00065 * tt**2
    elif fam == "poly-case-2":
        out = 0.46 - 0.507 * tt + 0.287 * tt**1.3 - 0.00977 * tt**2
    elif fam == "poly-case-3":
        out = 26.57 + 0.863 * tt - 11.34 * np.log(tt + 10) - 0.0114 * tt**2
    else:  # figure1-demo
        out = np.sin(2 * (4 * tt - 2)) + 2 * np.exp(-(16**2) * (tt - 0.5) ** 2)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# scenarios and trial generation


@dataclass(frozen=True)
class ScenarioSpec:
    drift: DriftFunction
    theta: float
    sigma_p: float
    sigma_t: float
    n_p: int
    n_t: int
    time_rule: tuple = ("index",)
    name: str = ""
    variance_setting: str = ""

    def __post_init__(self):
        if not (self.sigma_p > 0 and self.sigma_t > 0):
            raise ValueError("sigma_p and sigma_t must be positive")
        if self.n_p < 1 or self.n_t < 1:
            raise ValueError("both arms need at least one patient")
        rule = tuple(self.time_rule) if not isinstance(self.time_rule, str) else (self.time_rule,)
        if rule[0] == "index" and len(rule) == 1:
            pass
        elif rule[0] == "range" and len(rule) == 3 and rule[1] < rule[2]:
            rule = ("range", float(rule[1]), float(rule[2]))
        else:
            raise ValueError(f"time_rule must be ('index',) or ('range', lo, hi), got {rule}")
        object.__setattr__(self, "time_rule", rule)

    @property
    def n(self) -> int:
        return self.n_p + self.n_t

    def times(self) -> NDArray[np.float64]:
        if self.time_rule[0] == "index":
            return np.arange(1, self.n + 1, dtype=float)
        _, lo, hi = self.time_rule
        return np.linspace(lo, hi, self.n)

    @property
    def horizon(self) -> int:
        return int(math.floor(self.times().max()))

    @property
    def label(self) -> str:
        return f"{self.name}-{self.variance_setting}" if self.name else "custom"


_SETTINGS = {
    # setting: (sigma_p, sigma_t, n_p, n_t) for the 600-patient trials
    "equal": (0.3, 0.3, 300, 300),
    "unequal": (0.4, 0.2, 150, 450),
}


def paper_scenario(
    name: str, setting: str = "equal", theta: float = 0.0, *, rw_scale: str = "variance"
) -> ScenarioSpec:
    """Build a named simulation cell.

    ``name`` is ``S1``..``S4`` (600 patients, ``t_i = i``) or ``CS1``..``CS3``
    (case-study curves, 200 per arm, times evenly spaced over months 0-30).
    ``setting`` is ``equal`` or ``unequal`` variance.
    """
    if setting not in _SETTINGS:
        raise ValueError(f"setting must be 'equal' or 'unequal', got {setting!r}")
    sigma_p, sigma_t, n_p, n_t = _SETTINGS[setting]
    if name in ("S1", "S2", "S3", "S4"):
        n = n_p + n_t
        drift = {
            "S1": DriftFunction("zero"),
            "S2": DriftFunction("linear-ramp", {"amplitude": 0.3, "t_start": 1.0, "t_end": float(n)}),
            "S3": DriftFunction("random-walk", {"var": 0.002, "scale": rw_scale}),
            "S4": DriftFunction("random-walk", {"var": 0.004, "scale": rw_scale}),
        }[name]
        rule = ("index",)
    elif name in ("CS1", "CS2", "CS3"):
        drift = DriftFunction(f"poly-case-{name[-1]}")
        n_p = n_t = 200
        rule = ("range", 0.0, 30.0)
    else:
        raise ValueError(f"unknown scenario {name!r}")
    return ScenarioSpec(
        drift=drift, theta=float(theta), sigma_p=sigma_p, sigma_t=sigma_t,
        n_p=n_p, n_t=n_t, time_rule=rule, name=name, variance_setting=setting,
    )


def generate_trial(
    spec: ScenarioSpec,
    rng: np.random.Generator | int | None,
    drift: DriftFunction | None = None,
) -> TrialData:
    """Simulate one trial.

    A random-walk drift is realized from ``rng`` first unless an already
    realized ``drift`` is passed; then the fixed-margin assignment and the
    arm-specific normal noise are drawn.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    t = spec.times()
    if drift is None:
        drift = spec.drift.realize(rng, spec.horizon)
    a = np.zeros(spec.n, dtype=np.int8)
    a[: spec.n_t] = 1
    a = rng.permutation(a)
    sd = np.where(a == 1, spec.sigma_t, spec.sigma_p)
    y = drift_eval(drift, t) + a * spec.theta + rng.normal(0.0, 1.0, spec.n) * sd
    return TrialData(y=y, t=t, a=a)


# ---------------------------------------------------------------------------
# methods


@dataclass(frozen=True)
class MethodOptions:
    n_perm: int = 1000
    grid: CandidateGrid = field(default_factory=CandidateGrid)
    weights_scope: str = "full"


def _child(ss: np.random.SeedSequence, key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(ss.entropy, spawn_key=tuple(ss.spawn_key) + (key,))


def run_method(
    name: str,
    data: TrialData,
    seed: np.random.SeedSequence,
    options: MethodOptions = MethodOptions(),
) -> FitResult:
    """Apply one named method; ``seed`` feeds CV folds or permutations."""
    if name == "WTT":
        return welch_t(data)
    if name == "WT":
        return wilcoxon(data)
    if name == "SLR":
        return slr_fit(data)
    if name == "WLR":
        return wlr_fit(data)
    if name == "RR":
        return rr_fit(data)
    if name in ("RT(T)", "RT(W)"):
        stat = "welch-t" if name == "RT(T)" else "wilcoxon-rank-sum"
        return rand_tests(data, [stat], PermutationPlan(options.n_perm, seed))[stat]
    if name == "SWSR":
        rng = np.random.default_rng(seed)
        return swsr_fit(data, options.grid, rng, weights_scope=options.weights_scope)
    if name == "SWSR(S)":
        return swsr_fit(data, [SIMPLE_SPLINE], method=name)
    if name == "SWSR(C)":
        return swsr_fit(data, [COMPLEX_SPLINE], method=name)
    raise ValueError(f"unknown method {name!r}; choose from {METHOD_NAMES}")


def _run_methods(methods, data, method_ss, options):
    out = {}
    rt = [m for m in methods if m in ("RT(T)", "RT(W)")]
    if rt:
        # both statistics are evaluated on one shared set of re-randomizations
        stats = ["welch-t" if m == "RT(T)" else "wilcoxon-rank-sum" for m in rt]
        plan = PermutationPlan(options.n_perm, _child(method_ss, METHOD_NAMES.index("RT(T)")))
        try:
            res = rand_tests(data, stats, plan)
            for m, s in zip(rt, stats):
                out[m] = res[s]
        except (SWSRError, ValueError, np.linalg.LinAlgError) as exc:
            for m in rt:
                out[m] = exc
    for m in methods:
        if m in rt:
            continue
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                out[m] = run_method(m, data, _child(method_ss, METHOD_NAMES.index(m)), options)
        except (SWSRError, ValueError, np.linalg.LinAlgError) as exc:
            out[m] = exc
    return out


# ---------------------------------------------------------------------------
# Monte Carlo cells


@dataclass(frozen=True)
class MethodSummary:
    method: str
    rejection_rate: float
    bias: float
    emp_se: float
    coverage: float
    n_ok: int
    failures: int


@dataclass
class CellReport:
    scenario: str
    variance_setting: str
    theta: float
    n_iter: int
    seed: int
    alpha: float
    n_perm: int
    rows: dict[str, MethodSummary]
    wall_time: float
    p_values: dict[str, NDArray] = field(repr=False, default_factory=dict)
    estimates: dict[str, NDArray] = field(repr=False, default_factory=dict)

    def __getitem__(self, method: str) -> MethodSummary:
        return self.rows[method]


def _iteration_seeds(master_seed: int, i: int):
    ss = np.random.SeedSequence(master_seed, spawn_key=(i,))
    return _child(ss, 0), _child(ss, 1), _child(ss, 2)


def _simulate_chunk(spec, methods, indices, master_seed, options):
    m = len(methods)
    k = len(indices)
    p = np.full((k, m), np.nan)
    est = np.full((k, m), np.nan)
    lo = np.full((k, m), np.nan)
    hi = np.full((k, m), np.nan)
    ok = np.zeros((k, m), dtype=bool)
    for r, i in enumerate(indices):
        drift_ss, trial_ss, method_ss = _iteration_seeds(master_seed, i)
        drift = spec.drift.realize(np.random.default_rng(drift_ss), spec.horizon)
        data = generate_trial(spec, np.random.default_rng(trial_ss), drift=drift)
        results = _run_methods(methods, data, method_ss, options)
        for c, name in enumerate(methods):
            res = results[name]
            if isinstance(res, Exception):
                continue
            ok[r, c] = True
            p[r, c] = res.p_one_sided
            est[r, c] = res.theta_hat
            lo[r, c], hi[r, c] = res.ci95
    return p, est, lo, hi, ok


def _summarize(name, p, est, lo, hi, ok, theta, alpha) -> MethodSummary:
    n_ok = int(ok.sum())
    failures = int(ok.size - n_ok)
    if n_ok == 0:
        return MethodSummary(name, math.nan, math.nan, math.nan, math.nan, 0, failures)
    rej = float(np.mean(p[ok] < alpha))
    e = est[ok]
    if np.all(np.isnan(e)):
        return MethodSummary(name, rej, math.nan, math.nan, math.nan, n_ok, failures)
    bias = float(np.mean(e - theta))
    emp_se = float(np.std(e, ddof=1)) if n_ok > 1 else 0.0
    cover = float(np.mean((lo[ok] <= theta) & (theta <= hi[ok])))
    return MethodSummary(name, rej, bias, emp_se, cover, n_ok, failures)


def resolve_workers(threads: int | None) -> int:
    if threads is None:
        threads = int(os.environ.get("SWSR_THREADS", "1"))
    if threads < 1:
        raise ValueError(f"thread count must be >= 1, got {threads}")
    return threads


def run_cell(
    spec: ScenarioSpec,
    methods: Sequence[str],
    n_iter: int,
    master_seed: int,
    *,
    alpha: float = 0.025,
    n_perm: int = 1000,
    grid: CandidateGrid | None = None,
    weights_scope: str = "full",
    threads: int | None = 1,
    progress: Callable[[int], None] | None = None,
) -> CellReport:
    """Simulate ``n_iter`` trials of ``spec`` and score every method.

    A method that raises on an iteration is counted as a failure for that
    iteration and left out of its aggregates.

    Parameters
    ----------
    spec : ScenarioSpec
    methods : sequence of str
        Names from ``METHOD_NAMES``.
    n_iter : int
    master_seed : int
    alpha : float
        One-sided rejection level applied to ``p_one_sided``.
    n_perm : int
        Re-randomizations per trial for RT(T) / RT(W).
    grid : CandidateGrid, optional
        SWSR candidates (default four-candidate grid).
    threads : int, optional
        Worker processes; ``None`` reads ``SWSR_THREADS``.

    Returns
    -------
    CellReport
        Rejection rate, bias, empirical SE and 95% CI coverage per method.
    """
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    methods = list(dict.fromkeys(methods))
    for m in methods:
        if m not in METHOD_NAMES:
            raise ValueError(f"unknown method {m!r}; choose from {METHOD_NAMES}")
    options = MethodOptions(n_perm=n_perm, grid=grid or CandidateGrid(), weights_scope=weights_scope)
    workers = resolve_workers(threads)
    start = time.perf_counter()

    if workers == 1:
        parts = [_simulate_chunk(spec, methods, range(n_iter), master_seed, options)]
    else:
        n_chunks = min(n_iter, workers * 4)
        bounds = np.linspace(0, n_iter, n_chunks + 1).astype(int)
        chunks = [range(bounds[j], bounds[j + 1]) for j in range(n_chunks)]
        with ProcessPoolExecutor(workers) as pool:
            futures = [
                pool.submit(_simulate_chunk, spec, methods, c, master_seed, options)
                for c in chunks
            ]
            parts = [f.result() for f in futures]
    p, est, lo, hi, ok = (np.concatenate(x) for x in zip(*parts))
    rows = {
        name: _summarize(name, p[:, c], est[:, c], lo[:, c], hi[:, c], ok[:, c], spec.theta, alpha)
        for c, name in enumerate(methods)
    }
    return CellReport(
        scenario=spec.name or "custom",
        variance_setting=spec.variance_setting,
        theta=spec.theta,
        n_iter=n_iter,
        seed=master_seed,
        alpha=alpha,
        n_perm=n_perm,
        rows=rows,
        wall_time=time.perf_counter() - start,
        p_values={name: p[:, c] for c, name in enumerate(methods)},
        estimates={name: est[:, c] for c, name in enumerate(methods)},
    )


# ---------------------------------------------------------------------------
# spline demo


@dataclass
class Figure1Result:
    rmse: float
    n_basis: int
    grid: NDArray[np.float64]
    f_true: NDArray[np.float64]
    f_hat: NDArray[np.float64]
    scaled_bases: NDArray[np.float64]
    coefficients: NDArray[np.float64]


def figure1_demo(
    n_points: int = 300,
    k: int = 16,
    d: int = 3,
    noise_sd: float = 0.3,
    seed: int | None = 0,
    n_grid: int = 501,
) -> Figure1Result:
    """Unweighted spline fit to noisy samples of a sine-plus-bump curve.

    Samples sit at ``n_points`` evenly spaced times on [0, 1]; knots are
    the quantiles of those times. The fitted curve and each scaled basis
    ``gamma_j * B_j`` are returned on an ``n_grid`` point grid.
    """
    rng = np.random.default_rng(seed)
    curve = DriftFunction("figure1-demo")
    t = np.linspace(0.0, 1.0, n_points)
    y = drift_eval(curve, t) + rng.normal(0.0, noise_sd, n_points)
    knots = make_knot_vector(t, k, d)
    fit = ols_fit(design_matrix(t, knots).values, y)
    grid = np.linspace(0.0, 1.0, n_grid)
    B = design_matrix(grid, knots).values
    scaled = B * fit.coefficients
    f_hat = scaled.sum(axis=1)
    f_true = drift_eval(curve, grid)
    rmse = float(np.sqrt(np.mean((f_hat - f_true) ** 2)))
    return Figure1Result(
        rmse=rmse,
        n_basis=knots.n_basis,
        grid=grid,
        f_true=f_true,
        f_hat=f_hat,
        scaled_bases=scaled,
        coefficients=fit.coefficients,
    )
