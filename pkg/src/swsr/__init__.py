"""Semiparametric weighted spline regression for two-arm trials with a
time-varying placebo effect, its comparator tests, and a simulation engine."""

from .bspline import BasisMatrix, KnotVector, basis_value, design_matrix, make_knot_vector
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
from .linmodels import DesignSpec, GroupWeights, LinearFit, group_weights, ols_fit, wls_fit
from .randtest import PermutationPlan, rand_test
from .simcore import (
    DriftFunction,
    ScenarioSpec,
    drift_eval,
    figure1_demo,
    generate_trial,
    paper_scenario,
    run_cell,
)

__version__ = "0.1.0"
