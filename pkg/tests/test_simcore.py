import math

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st

from swsr.errors import DriftStateError
from swsr.simcore import (
    METHOD_NAMES,
    DriftFunction,
    ScenarioSpec,
    drift_eval,
    figure1_demo,
    generate_trial,
    paper_scenario,
    run_cell,
    run_method,
)


# --- drift -------------------------------------------------------------------


def test_linear_ramp_endpoints():
    ramp = paper_scenario("S2").drift
    assert drift_eval(ramp, 1) == 0.0
    assert drift_eval(ramp, 600) == pytest.approx(0.3)
    np.testing.assert_allclose(drift_eval(ramp, [1, 300.5, 600]), [0, 0.15, 0.3])


def test_random_walk_partial_sums():
    rw = DriftFunction("random-walk", {"var": 0.002}).realize(1, 10)
    assert drift_eval(rw, 0.5) == 0.0
    np.testing.assert_allclose(drift_eval(rw, [1, 3.7, 10]), np.cumsum(rw.increments)[[0, 2, 9]])
    with pytest.raises(ValueError):
        drift_eval(rw, 11)


def test_unrealized_random_walk_refused():
    with pytest.raises(DriftStateError):
        drift_eval(DriftFunction("random-walk", {"var": 0.002}), 3.0)


def test_drift_validation():
    with pytest.raises(ValueError):
        DriftFunction("random-walk", {"var": 0.0})
    with pytest.raises(ValueError):
        DriftFunction("random-walk", {"var": 0.1, "scale": "other"})
    with pytest.raises(ValueError):
        DriftFunction("quadratic")


def test_case_study_curves():
    assert drift_eval(DriftFunction("poly-case-1"), 0.0) == pytest.approx(0.36)
    assert drift_eval(DriftFunction("poly-case-2"), 0.0) == pytest.approx(0.46)
    t = 10.0
    expected = 26.57 + 0.863 * t - 11.34 * math.log(t + 10) - 0.0114 * t**2
    assert drift_eval(DriftFunction("poly-case-3"), t) == pytest.approx(expected)


def test_random_walk_increment_variances():
    s3 = paper_scenario("S3").drift
    s4 = paper_scenario("S4").drift
    rng = np.random.default_rng(0)
    v3 = np.var(np.concatenate([s3.realize(rng, 600).increments for _ in range(200)]))
    v4 = np.var(np.concatenate([s4.realize(rng, 600).increments for _ in range(200)]))
    assert v3 == pytest.approx(0.002, rel=0.05)
    assert v4 == pytest.approx(0.004, rel=0.05)
    assert v4 / v3 == pytest.approx(2.0, rel=0.05)


def test_sd_reading_of_increments():
    sd = paper_scenario("S3", rw_scale="sd").drift
    assert sd.increment_sd == 0.002
    assert paper_scenario("S3").drift.increment_sd == pytest.approx(math.sqrt(0.002))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1))
def test_drift_does_not_depend_on_assignment(drift_seed, trial_seed):
    spec = paper_scenario("S4", "unequal", 0.1)
    drift = spec.drift.realize(drift_seed, spec.horizon)
    d1 = generate_trial(spec, trial_seed, drift=drift)
    d2 = generate_trial(spec, trial_seed + 1, drift=drift)
    f = drift_eval(drift, spec.times())
    np.testing.assert_array_equal(f, drift_eval(drift, d2.t))
    np.testing.assert_array_equal(d1.t, d2.t)


# --- scenarios and trials ----------------------------------------------------


def test_scenario_table():
    eq = paper_scenario("S1", "equal")
    un = paper_scenario("S1", "unequal")
    assert (eq.sigma_p, eq.sigma_t, eq.n_p, eq.n_t) == (0.3, 0.3, 300, 300)
    assert (un.sigma_p, un.sigma_t, un.n_p, un.n_t) == (0.4, 0.2, 150, 450)
    np.testing.assert_array_equal(eq.times(), np.arange(1, 601))
    cs = paper_scenario("CS2", "unequal", 0.12)
    assert (cs.n_p, cs.n_t, cs.sigma_p) == (200, 200, 0.4)
    np.testing.assert_allclose(cs.times(), np.linspace(0, 30, 400))
    assert cs.label == "CS2-unequal"
    with pytest.raises(ValueError):
        paper_scenario("S9")
    with pytest.raises(ValueError):
        paper_scenario("S1", "mixed")


def test_scenario_validation():
    z = DriftFunction("zero")
    with pytest.raises(ValueError):
        ScenarioSpec(z, 0.0, 0.0, 0.3, 10, 10)
    with pytest.raises(ValueError):
        ScenarioSpec(z, 0.0, 0.3, 0.3, 0, 10)
    with pytest.raises(ValueError):
        ScenarioSpec(z, 0.0, 0.3, 0.3, 10, 10, time_rule=("range", 5, 1))


def test_noiseless_trial():
    spec = ScenarioSpec(DriftFunction("zero"), 0.5, 1e-12, 1e-12, 20, 30)
    d = generate_trial(spec, 0)
    np.testing.assert_allclose(d.y, 0.5 * d.a, atol=1e-10)
    assert d.n_t == 30


def test_arm_means_within_three_se():
    spec = paper_scenario("S1", "equal", 0.1)
    half_width = 3 * 0.3 / math.sqrt(300)
    misses = 0
    for seed in range(300):
        yp, yt = generate_trial(spec, seed).arms()
        misses += abs(yp.mean()) > half_width or abs(yt.mean() - 0.1) > half_width
    # each arm misses with probability 0.0027
    assert misses <= 8


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_fixed_margins(seed):
    d = generate_trial(paper_scenario("S3", "unequal"), seed)
    assert d.n_t == 450 and d.n_p == 150


# --- methods and cells -------------------------------------------------------


def test_run_method_names():
    d = generate_trial(paper_scenario("S1", "equal", 0.1), 3)
    ss = np.random.SeedSequence(5)
    for name in METHOD_NAMES:
        res = run_method(name, d, ss)
        assert res.method == name
        assert 0 <= res.p_one_sided <= 1
    with pytest.raises(ValueError):
        run_method("OLS", d, ss)
    assert run_method("SWSR(C)", d, ss).diagnostics["selected"] == (100, 3)
    assert run_method("SWSR(S)", d, ss).diagnostics["selected"] == (1, 1)


def test_single_iteration_cell():
    rep = run_cell(paper_scenario("S1"), ["WTT", "WT"], 1, 9)
    assert rep.rows["WTT"].rejection_rate in (0.0, 1.0)
    assert rep.rows["WTT"].emp_se == 0.0
    assert math.isnan(rep.rows["WT"].bias)
    with pytest.raises(ValueError):
        run_cell(paper_scenario("S1"), ["WTT"], 0, 1)
    with pytest.raises(ValueError):
        run_cell(paper_scenario("S1"), ["XYZ"], 1, 1)


def test_failures_are_counted_not_fatal():
    # four patients per trial: SWSR candidates with k=5 cannot be fitted
    spec = ScenarioSpec(DriftFunction("zero"), 0.0, 0.3, 0.3, 2, 2)
    rep = run_cell(spec, ["WTT", "SWSR(C)"], 5, 1)
    assert rep.rows["SWSR(C)"].failures == 5
    assert math.isnan(rep.rows["SWSR(C)"].rejection_rate)
    assert rep.rows["WTT"].failures == 0


def test_report_metrics_in_range():
    rep = run_cell(paper_scenario("S3", "unequal", 0.13), ["WTT", "WLR", "RT(T)", "SWSR"], 40, 2, n_perm=99)
    for s in rep.rows.values():
        assert 0 <= s.rejection_rate <= 1
        if not math.isnan(s.coverage):
            assert 0 <= s.coverage <= 1 and s.emp_se >= 0
    assert math.isnan(rep.rows["RT(T)"].bias)


def test_master_seed_reproducible_across_workers():
    spec = paper_scenario("S4", "unequal", 0.13)
    methods = ["WTT", "WT", "RR", "RT(T)", "RT(W)", "SWSR"]
    one = run_cell(spec, methods, 24, 42, n_perm=99, threads=1)
    eight = run_cell(spec, methods, 24, 42, n_perm=99, threads=8)
    assert one.rows == eight.rows
    for m in methods:
        np.testing.assert_array_equal(one.p_values[m], eight.p_values[m])
        np.testing.assert_array_equal(one.estimates[m], eight.estimates[m])
    other = run_cell(spec, methods, 24, 43, n_perm=99)
    assert not np.array_equal(one.p_values["WTT"], other.p_values["WTT"])


def test_threads_from_environment(monkeypatch):
    monkeypatch.setenv("SWSR_THREADS", "2")
    spec = paper_scenario("S1")
    env = run_cell(spec, ["WTT"], 6, 1, threads=None)
    assert env.rows == run_cell(spec, ["WTT"], 6, 1, threads=1).rows


def test_null_p_values_roughly_uniform():
    rep = run_cell(paper_scenario("S1", "equal", 0.0), ["WTT"], 2000, 8)
    assert scipy.stats.kstest(rep.p_values["WTT"], "uniform").statistic < 0.04


# --- spline demo -------------------------------------------------------------


def test_figure1_noiseless_and_default():
    clean = figure1_demo(noise_sd=0.0)
    assert clean.n_basis == 20
    assert clean.rmse < 0.05
    noisy = figure1_demo(seed=1)
    assert noisy.rmse < 0.15
    np.testing.assert_allclose(noisy.scaled_bases.sum(axis=1), noisy.f_hat, atol=1e-12)
    assert noisy.scaled_bases.shape == (501, 20)
