"""Pointwise variance of the coefficient functions by resampling.

Multiplier resampling perturbs every subject's contribution to the
estimating equations and the Breslow sums by an i.i.d. unit-variance
weight and refits; the nonparametric bootstrap resamples subjects with
replacement, which amounts to integer weights equal to the number of
times each subject is drawn. Both refit from the point estimate.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.stats import norm

from .census import CensusTable
from .errors import ConfigurationError, ConvergenceError, FitError, InsufficientDataError
from .estimator import FitResult, fit, fit_batch
from .model import Cohort, ModelSpec, StepFunctionSet

log = logging.getLogger(__name__)

FAMILIES = ("PoissonUnit", "StandardNormal")
STREAM_MULTIPLIERS, STREAM_BOOTSTRAP = 10, 11
BATCH = 50


def _replicate_rng(seed: int, stream: int, b: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(
        int(seed), spawn_key=(stream, b))))


@dataclass(frozen=True)
class MultiplierPlan:
    """Multiplier family, number of replicates ``B`` and seed.

    ``PoissonUnit`` draws have mean 1 and variance 1. ``StandardNormal``
    draws ``G`` have mean 0 and variance 1 and are used as weights ``1 + G``.
    """

    family: str = "PoissonUnit"
    replicates: int = 400
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown multiplier family {self.family!r}")
        if int(self.replicates) != self.replicates or self.replicates < 2:
            raise ConfigurationError("need at least 2 replicates")


def generate_multipliers(plan: MultiplierPlan, n_cohort: int) -> np.ndarray:
    """Raw multiplier draws, shape (B, n); row ``b`` comes from its own stream."""
    out = np.empty((plan.replicates, n_cohort))
    for b in range(plan.replicates):
        rng = _replicate_rng(plan.seed, STREAM_MULTIPLIERS, b)
        if plan.family == "PoissonUnit":
            out[b] = rng.poisson(1.0, n_cohort)
        else:
            out[b] = rng.standard_normal(n_cohort)
    return out


def multiplier_weights(plan: MultiplierPlan, n_cohort: int) -> np.ndarray:
    """Subject weights (B, n) entering the perturbed equations."""
    draws = generate_multipliers(plan, n_cohort)
    return draws if plan.family == "PoissonUnit" else 1.0 + draws


def default_resampler(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.integers(0, n, n)


def bootstrap_weights(n_cohort: int, replicates: int, seed: int,
                      resampler: Callable | None = None) -> np.ndarray:
    """Draw counts (B, n) of each subject in ``B`` resamples with replacement.

    ``resampler(rng, n)`` returns the drawn subject indices; a subject's
    events always travel together because weights are per subject.
    """
    resampler = resampler or default_resampler
    out = np.empty((replicates, n_cohort))
    for b in range(replicates):
        idx = np.asarray(resampler(_replicate_rng(seed, STREAM_BOOTSTRAP, b), n_cohort))
        out[b] = np.bincount(idx, minlength=n_cohort)
    return out


@dataclass
class ReplicateSet:
    """Coefficient and cumulative-baseline replicates of the successful refits.

    ``beta`` is (B_ok, S, G, p) and ``cumulative`` (B_ok, S, G + 1);
    ``dropped`` counts replicates that diverged, failed or did not converge.
    """

    method: str
    estimate: FitResult
    beta: np.ndarray
    cumulative: np.ndarray
    requested: int
    dropped: int
    failures: dict

    @property
    def dropped_fraction(self) -> float:
        return self.dropped / self.requested


def _fit_chunk(args):
    cohort, census, spec, weights, init, one_step = args
    batch = fit_batch(cohort, census, spec, weights, init=init,
                      max_iterations=1 if one_step else None, accelerate=not one_step)
    ok = batch.ok if not one_step else np.array(
        [f in (None, "not_converged") for f in batch.failure])
    reasons = [f if not k else None for f, k in zip(batch.failure, ok)]
    return batch.beta[ok], batch.cumulative[ok], reasons


def _refit(method, cohort, census, spec, weights, estimate, one_step, n_jobs) -> ReplicateSet:
    init = estimate.params
    chunks = [(cohort, census, spec, weights[i:i + BATCH], init, one_step)
              for i in range(0, weights.shape[0], BATCH)]
    if n_jobs > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_fit_chunk, chunks))
    else:
        results = [_fit_chunk(c) for c in chunks]
    S, G1 = estimate.params.cumulative.shape
    beta = np.concatenate([r[0] for r in results]) if results else np.zeros((0,))
    cum = np.concatenate([r[1] for r in results]) if results else np.zeros((0, S, G1))
    failures: dict = {}
    for r in results:
        for reason in r[2]:
            if reason is not None:
                failures[reason] = failures.get(reason, 0) + 1
    dropped = sum(failures.values())
    if dropped:
        log.warning("%s: dropped %d of %d replicates (%s)", method, dropped,
                    weights.shape[0], failures)
    return ReplicateSet(method, estimate, beta, cum, weights.shape[0], dropped, failures)


def perturbed_fit(cohort: Cohort, census: CensusTable, spec: ModelSpec, weights,
                  init: StepFunctionSet | None = None, one_step: bool = False) -> StepFunctionSet:
    """Refit with per-subject multipliers ``weights`` (n,).

    Starts from ``init`` (default: the usual initial values) and iterates to
    convergence, or stops after one update with ``one_step``. Stratum
    probabilities are recomputed under the perturbed parameters.

    Raises
    ------
    ConvergenceError
        The perturbed fit did not converge.
    """
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (cohort.n_subjects,):
        raise ConfigurationError("weights must have one entry per cohort subject")
    batch = fit_batch(cohort, census, spec, weights[None], init=init,
                      max_iterations=1 if one_step else None)
    fail = batch.failure[0]
    if fail is not None and not (one_step and fail == "not_converged"):
        if fail.startswith("failed"):
            raise FitError(fail)
        raise ConvergenceError(f"perturbed fit {fail}")
    return StepFunctionSet(spec.grid, batch.beta[0], batch.baseline[0],
                           np.maximum.accumulate(batch.cumulative[0], axis=1))


def multiplier_replicates(cohort: Cohort, census: CensusTable, spec: ModelSpec,
                          plan: MultiplierPlan, estimate: FitResult | None = None,
                          one_step: bool = False, n_jobs: int = 1) -> ReplicateSet:
    """Multiplier refits warm-started at the point estimate.

    Replicates are processed in fixed batches of ``BATCH``; ``n_jobs``
    spreads batches over processes without changing any result.
    """
    estimate = estimate or fit(cohort, census, spec)
    weights = multiplier_weights(plan, cohort.n_subjects)
    return _refit("multiplier", cohort, census, spec, weights, estimate, one_step, n_jobs)


def bootstrap(cohort: Cohort, census: CensusTable, spec: ModelSpec, B: int = 1000,
              seed: int = 0, estimate: FitResult | None = None,
              resampler: Callable | None = None, n_jobs: int = 1) -> ReplicateSet:
    """Nonparametric bootstrap over cohort subjects; the census stays fixed."""
    if int(B) != B or B < 1:
        raise ConfigurationError("need at least 1 bootstrap replicate")
    estimate = estimate or fit(cohort, census, spec)
    weights = bootstrap_weights(cohort.n_subjects, int(B), seed, resampler)
    return _refit("bootstrap", cohort, census, spec, weights, estimate, False, n_jobs)


@dataclass
class VarianceBands:
    """Pointwise standard errors and normal confidence limits, each (S, G, p)."""

    estimate: np.ndarray
    se: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float
    n_replicates: int
    dropped: int = 0


def variance_bands(replicates, estimate=None, level: float = 0.95) -> VarianceBands:
    """Sample variance across replicates and ``estimate +/- z * SE`` limits.

    Parameters
    ----------
    replicates : ReplicateSet or array (B, S, G, p)
    estimate : array (S, G, p), optional
        Centre of the intervals; taken from the replicate set when omitted.
    level : float
        Two-sided confidence level.

    Raises
    ------
    InsufficientDataError
        Fewer than two successful replicates.
    """
    dropped = 0
    if isinstance(replicates, ReplicateSet):
        dropped = replicates.dropped
        if estimate is None:
            estimate = replicates.estimate.params.beta
        replicates = replicates.beta
    reps = np.asarray(replicates, dtype=float)
    if reps.ndim < 1 or reps.shape[0] < 2:
        raise InsufficientDataError("need at least 2 successful replicates")
    if not 0 < level < 1:
        raise ConfigurationError("level must lie in (0, 1)")
    est = reps.mean(axis=0) if estimate is None else np.asarray(estimate, dtype=float)
    se = reps.std(axis=0, ddof=1)
    z = norm.ppf(0.5 + level / 2.0)
    return VarianceBands(est, se, est - z * se, est + z * se, level, reps.shape[0], dropped)
