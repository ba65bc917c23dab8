import math
import warnings

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st

from swsr.estimators import TrialData, welch_t
from swsr.randtest import (
    BLOCK_SIZE,
    PermutationPlan,
    permuted_assignments,
    rand_test,
    rand_tests,
)


def _data(rng, n=40, n_t=None, shift=0.0):
    n_t = n // 2 if n_t is None else n_t
    a = np.zeros(n, dtype=int)
    a[rng.choice(n, n_t, replace=False)] = 1
    return TrialData(y=rng.normal(size=n) + shift * a, t=np.arange(n, dtype=float), a=a)


def test_plan_validation():
    with pytest.raises(ValueError):
        PermutationPlan(n_perm=0)
    with pytest.raises(ValueError):
        PermutationPlan(scheme="block")
    assert PermutationPlan().n_perm == 10_000


def test_constant_responses_give_p_one():
    d = TrialData(y=np.ones(20), t=np.arange(20), a=np.tile([0, 1], 10))
    for s in ("welch-t", "wilcoxon-rank-sum"):
        res = rand_test(d, s, PermutationPlan(n_perm=200, seed=1))
        assert res.p_one_sided == 1.0
    res = rand_test(d, "welch-t", PermutationPlan(n_perm=200, seed=1))
    assert res.diagnostics["degenerate_permutations"] == 200


def test_extreme_statistic_gives_minimal_p():
    # 40 choose 20 arrangements: hitting the observed one again is negligible
    y = np.arange(40.0)
    a = (y >= 20).astype(int)
    d = TrialData(y=y, t=y, a=a)
    for s in ("welch-t", "wilcoxon-rank-sum"):
        res = rand_test(d, s, PermutationPlan(n_perm=500, seed=3))
        assert res.p_one_sided == 1 / 501
        assert res.diagnostics["exceedances"] == 0


def test_observed_statistics_match_direct_formulas():
    d = _data(np.random.default_rng(4), n=30, n_t=12)
    res = rand_tests(d, ["welch-t", "wilcoxon-rank-sum"], PermutationPlan(n_perm=100))
    t_direct = welch_t(d).diagnostics["statistic"]
    w_direct = scipy.stats.rankdata(d.y)[d.a == 1].sum()
    assert res["welch-t"].diagnostics["statistic"] == pytest.approx(t_direct, rel=1e-10)
    assert res["wilcoxon-rank-sum"].diagnostics["statistic"] == pytest.approx(w_direct)
    assert res["welch-t"].method == "RT(T)" and res["wilcoxon-rank-sum"].method == "RT(W)"
    assert not res["welch-t"].has_estimate


def test_permutation_statistics_match_brute_force():
    rng = np.random.default_rng(5)
    d = _data(rng, n=16, n_t=6)
    plan = PermutationPlan(n_perm=120, seed=11)
    A = np.vstack([permuted_assignments(d.a, plan, b) for b in range(math.ceil(120 / BLOCK_SIZE))])
    s0 = welch_t(d).diagnostics["statistic"]
    stats = []
    for row in A:
        yp, yt = d.y[row == 0], d.y[row == 1]
        stats.append(scipy.stats.ttest_ind(yt, yp, equal_var=False).statistic)
    expected = (1 + sum(s >= s0 - 1e-10 * max(1, abs(s0)) for s in stats)) / 121
    assert rand_test(d, "welch-t", plan).p_one_sided == pytest.approx(expected, abs=0)


def test_approximates_exact_rank_sum_test():
    rng = np.random.default_rng(6)
    d = _data(rng, n=30, n_t=15, shift=0.6)
    exact = scipy.stats.mannwhitneyu(
        d.y[d.a == 1], d.y[d.a == 0], alternative="greater", method="exact"
    ).pvalue
    p = rand_test(d, "wilcoxon-rank-sum", PermutationPlan(n_perm=20_000, seed=2)).p_one_sided
    assert abs(p - exact) < 4 * math.sqrt(exact * (1 - exact) / 20_000) + 1e-4


def test_welch_needs_two_per_arm_and_unknown_statistic():
    d = TrialData(y=[1.0, 2.0, 3.0], t=[0, 1, 2], a=[0, 0, 1])
    with pytest.raises(ValueError):
        rand_test(d, "welch-t", PermutationPlan(n_perm=100))
    with pytest.raises(ValueError):
        rand_test(d, "median", PermutationPlan(n_perm=100))
    # rank statistic still works with a single treated patient
    assert 0 < rand_test(d, "wilcoxon-rank-sum", PermutationPlan(n_perm=100)).p_one_sided <= 1


def test_low_n_perm_warns():
    d = _data(np.random.default_rng(7))
    with pytest.warns(RuntimeWarning, match="coarse"):
        rand_test(d, "welch-t", PermutationPlan(n_perm=10))


def test_block_out_of_range():
    with pytest.raises(IndexError):
        permuted_assignments(np.array([0, 1, 1]), PermutationPlan(n_perm=10), 1)


def test_threaded_blocks_match_serial():
    d = _data(np.random.default_rng(8), n=60)
    serial = rand_tests(d, ["welch-t", "wilcoxon-rank-sum"], PermutationPlan(n_perm=777, seed=9))
    threaded = rand_tests(
        d, ["welch-t", "wilcoxon-rank-sum"], PermutationPlan(n_perm=777, seed=9, workers=4)
    )
    for s in serial:
        assert serial[s].p_one_sided == threaded[s].p_one_sided


def test_seed_sequence_plans_are_distinct_and_reproducible():
    d = _data(np.random.default_rng(10), n=50, shift=0.2)
    ss = np.random.SeedSequence(123, spawn_key=(4,))
    p1 = rand_test(d, "welch-t", PermutationPlan(n_perm=300, seed=ss)).p_one_sided
    p2 = rand_test(d, "welch-t", PermutationPlan(n_perm=300, seed=ss)).p_one_sided
    assert p1 == p2


def test_null_rejection_rate_is_controlled():
    rng = np.random.default_rng(11)
    n_trials, alpha = 1000, 0.05
    rejections = 0
    for i in range(n_trials):
        d = _data(rng, n=30)
        rejections += rand_test(d, "welch-t", PermutationPlan(n_perm=199, seed=i)).p_one_sided <= alpha
    rate = rejections / n_trials
    assert rate <= alpha + 3 * math.sqrt(alpha * (1 - alpha) / n_trials)


# --- properties --------------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 60), st.data(), st.integers(1, 400), st.integers(0, 2**32 - 1))
def test_margins_preserved(n, data, n_perm, seed):
    n_t = data.draw(st.integers(1, n - 1))
    a = np.zeros(n)
    a[:n_t] = 1
    plan = PermutationPlan(n_perm=n_perm, seed=seed, check_margins=True)
    for b in range(math.ceil(n_perm / BLOCK_SIZE)):
        A = permuted_assignments(a, plan, b)
        assert np.all(A.sum(axis=1) == n_t)
        assert set(np.unique(A)) <= {0.0, 1.0}


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 300), st.sampled_from(["welch-t", "wilcoxon-rank-sum"]))
def test_determinism_and_lower_bound(seed, n_perm, stat):
    d = _data(np.random.default_rng(seed), n=24)
    plan = PermutationPlan(n_perm=n_perm, seed=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        p1 = rand_test(d, stat, plan).p_one_sided
        p2 = rand_test(d, stat, plan).p_one_sided
    assert p1 == p2
    assert 1 / (n_perm + 1) <= p1 <= 1.0


def test_assignments_are_uniform_over_subsets():
    # 4 choose 2 = 6 subsets, each should appear about 1/6 of the time
    plan = PermutationPlan(n_perm=6000, seed=12)
    a = np.array([1, 1, 0, 0])
    A = np.vstack([permuted_assignments(a, plan, b) for b in range(6000 // BLOCK_SIZE)])
    codes = A @ np.array([8, 4, 2, 1])
    _, counts = np.unique(codes, return_counts=True)
    assert counts.size == 6
    assert scipy.stats.chisquare(counts).pvalue > 1e-3
