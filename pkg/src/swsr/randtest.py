"""Re-randomization tests with fixed arm sizes.

Responses are held fixed and treatment labels are re-drawn uniformly over
all assignments with the observed number of treated patients. Draws are
made in blocks, each block seeded from ``(plan seed, block index)``, so the
p-value does not depend on how blocks are scheduled.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.stats import rankdata

from .estimators import FitResult, TrialData

__all__ = ["PermutationPlan", "rand_test", "rand_tests", "STATISTICS", "permuted_assignments"]

STATISTICS = ("welch-t", "wilcoxon-rank-sum")
METHOD_LABELS = {"welch-t": "RT(T)", "wilcoxon-rank-sum": "RT(W)"}
BLOCK_SIZE = 50  # keeps one block of keys in cache
# S_b counts as "at least as extreme" within this relative tolerance of S_0
TIE_RTOL = 1e-10


@dataclass(frozen=True)
class PermutationPlan:
    n_perm: int = 10_000
    seed: int | np.random.SeedSequence | None = 0
    scheme: str = "fixed-margins"
    workers: int = 1
    check_margins: bool = False

    def __post_init__(self):
        if self.n_perm < 1:
            raise ValueError(f"n_perm must be >= 1, got {self.n_perm}")
        if self.scheme != "fixed-margins":
            raise ValueError(f"unsupported scheme {self.scheme!r}")

    def block_rng(self, block: int) -> np.random.Generator:
        seed = self.seed
        if isinstance(seed, np.random.SeedSequence):
            ss = np.random.SeedSequence(
                seed.entropy, spawn_key=tuple(seed.spawn_key) + (block,)
            )
        else:
            ss = np.random.SeedSequence(seed, spawn_key=(block,))
        return np.random.default_rng(ss)


def permuted_assignments(a: NDArray, plan: PermutationPlan, block: int) -> NDArray:
    """0/1 assignment vectors (rows) re-drawn in block ``block`` of ``plan``.

    Row ``b`` treats the ``n_t`` patients with the smallest of ``n`` i.i.d.
    uniform keys, a uniformly random ``n_t``-subset.
    """
    a = np.asarray(a).ravel()
    n, n_t = a.size, int(a.sum())
    size = min(BLOCK_SIZE, plan.n_perm - block * BLOCK_SIZE)
    if size <= 0:
        raise IndexError(f"block {block} is beyond n_perm={plan.n_perm}")
    keys = plan.block_rng(block).random((size, n))
    cut = np.partition(keys, n_t - 1, axis=1)[:, n_t - 1 : n_t]
    A = (keys <= cut).astype(float)
    if plan.check_margins:
        assert np.all(A.sum(axis=1) == n_t), "margin violated"
    return A


def _summary_columns(y: NDArray) -> NDArray:
    """Centred responses, their squares and midranks, one column each."""
    yc = y - y.mean()
    return np.column_stack([yc, yc * yc, rankdata(y)])


def _welch_from_sums(sums: NDArray, totals: NDArray, n: int, n_t: int):
    """Welch t statistic (treatment minus placebo) from per-row arm sums."""
    n_p = n - n_t
    s_t, s2_t = sums[:, 0], sums[:, 1]
    s_p, s2_p = totals[0] - s_t, totals[1] - s2_t
    var_t = np.maximum(s2_t - s_t**2 / n_t, 0.0) / (n_t - 1)
    var_p = np.maximum(s2_p - s_p**2 / n_p, 0.0) / (n_p - 1)
    se2 = var_t / n_t + var_p / n_p
    diff = s_t / n_t - s_p / n_p
    ok = se2 > 0
    stat = np.zeros_like(diff)
    stat[ok] = diff[ok] / np.sqrt(se2[ok])
    return stat, int((~ok).sum())


def _statistics(name: str, sums: NDArray, totals: NDArray, n: int, n_t: int):
    if name == "welch-t":
        return _welch_from_sums(sums, totals, n, n_t)
    return sums[:, 2], 0


def rand_tests(
    data: TrialData, statistics: Sequence[str], plan: PermutationPlan
) -> dict[str, FitResult]:
    """Several randomization tests sharing the same re-drawn assignments.

    ``p = (1 + #{b: S_b >= S_0}) / (1 + n_perm)`` for each statistic.
    """
    for s in statistics:
        if s not in STATISTICS:
            raise ValueError(f"unknown statistic {s!r}; choose from {STATISTICS}")
    if "welch-t" in statistics and min(data.n_t, data.n_p) < 2:
        raise ValueError("welch-t statistic needs >= 2 observations per arm")
    if plan.n_perm < 99:
        warnings.warn(
            f"n_perm={plan.n_perm} gives a coarse p-value", RuntimeWarning, stacklevel=2
        )
    n, n_t = data.n, data.n_t
    a = data.a.astype(float)
    cols = _summary_columns(data.y)
    totals = cols.sum(axis=0)
    obs_sums = a[None, :] @ cols
    observed = {s: float(_statistics(s, obs_sums, totals, n, n_t)[0][0]) for s in statistics}
    n_blocks = math.ceil(plan.n_perm / BLOCK_SIZE)

    def run_block(b):
        sums = permuted_assignments(a, plan, b) @ cols
        out = {}
        for s in statistics:
            stat, degenerate = _statistics(s, sums, totals, n, n_t)
            s0 = observed[s]
            hits = int(np.sum(stat >= s0 - TIE_RTOL * max(1.0, abs(s0))))
            out[s] = (hits, degenerate)
        return out

    if plan.workers > 1 and n_blocks > 1:
        with ThreadPoolExecutor(plan.workers) as pool:
            per_block = list(pool.map(run_block, range(n_blocks)))
    else:
        per_block = [run_block(b) for b in range(n_blocks)]

    results = {}
    for s in statistics:
        hits = sum(blk[s][0] for blk in per_block)
        degenerate = sum(blk[s][1] for blk in per_block)
        p = (1 + hits) / (1 + plan.n_perm)
        results[s] = FitResult(
            theta_hat=math.nan,
            se=math.nan,
            p_one_sided=p,
            ci95=(math.nan, math.nan),
            method=METHOD_LABELS[s],
            diagnostics={
                "statistic": observed[s],
                "n_perm": plan.n_perm,
                "exceedances": hits,
                "degenerate_permutations": degenerate,
            },
        )
    return results


def rand_test(data: TrialData, statistic: str, plan: PermutationPlan) -> FitResult:
    """One-sided randomization test of ``theta > 0``.

    Parameters
    ----------
    data : TrialData
    statistic : {"welch-t", "wilcoxon-rank-sum"}
        Larger values favour a positive treatment effect. A Welch statistic
        with zero variance is defined as 0 and counted in the diagnostics.
    plan : PermutationPlan
    """
    return rand_tests(data, [statistic], plan)[statistic]
