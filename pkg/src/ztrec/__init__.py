"""Stratified Cox-type intensity models with time-varying coefficients for
zero-truncated recurrent-event data supplemented by census counts."""

from .census import CensusTable, at_risk_count, weighted_moment, zbar
from .errors import *  # noqa: F401,F403
from .estimator import (BatchFit, FitResult, breslow_baseline, fit, fit_batch, fit_submodel,
                        score_jacobian_at, score_known_strata, score_partial_strata,
                        solve_beta_at)
from .kernel import KernelConfig, kernel_weight, local_weights
from .model import (AgeGrid, Cohort, CovariateSpace, ModelSpec, StepFunctionSet,
                    StratificationRule, SubjectRecord, enumerate_covariate_space, intensity,
                    stratum_at)
from .simulator import ScenarioSpec, simulate
from .strata import (cumulative_intensity, prob_stratum_given_covariate,
                     prob_stratum_given_data)
from .variance import (MultiplierPlan, ReplicateSet, VarianceBands, bootstrap,
                       bootstrap_weights, generate_multipliers, multiplier_replicates,
                       multiplier_weights, perturbed_fit, variance_bands)

__version__ = "0.1.0"
