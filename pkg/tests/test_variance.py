import numpy as np
import pytest
from scipy.stats import kstest

from ztrec import (ModelSpec, MultiplierPlan, bootstrap, bootstrap_weights, fit,
                   generate_multipliers, multiplier_replicates, multiplier_weights,
                   perturbed_fit, variance_bands)
from ztrec.errors import ConfigurationError, InsufficientDataError
from ztrec.estimator import EstimatingEquations

SPEC = ModelSpec()


def test_poisson_moments():
    w = generate_multipliers(MultiplierPlan("PoissonUnit", 10_000, seed=4), 1)[:, 0]
    assert abs(w.mean() - 1) <= 0.03
    assert abs(w.var(ddof=1) - 1) <= 0.05


def test_normal_multipliers_ks():
    plan = MultiplierPlan("StandardNormal", 10_000, seed=4)
    draws = generate_multipliers(plan, 1)[:, 0]
    assert kstest(draws, "norm").statistic < 1.358 / np.sqrt(draws.size)
    np.testing.assert_array_equal(multiplier_weights(plan, 1)[:, 0], 1 + draws)


def test_multipliers_deterministic_per_replicate():
    plan = MultiplierPlan(replicates=20, seed=9)
    a = generate_multipliers(plan, 50)
    np.testing.assert_array_equal(a, generate_multipliers(plan, 50))
    # row b does not depend on how many replicates are requested
    np.testing.assert_array_equal(a[:5], generate_multipliers(
        MultiplierPlan(replicates=5, seed=9), 50))
    assert not np.array_equal(a, generate_multipliers(MultiplierPlan(replicates=20, seed=10),
                                                      50))


@pytest.mark.parametrize("kwargs", [{"family": "Exponential"}, {"replicates": 1}])
def test_plan_validation(kwargs):
    with pytest.raises(ConfigurationError):
        MultiplierPlan(**kwargs)


def test_bootstrap_weights_structure():
    w = bootstrap_weights(30, 200, seed=1)
    assert w.shape == (200, 30)
    assert np.all(w.sum(axis=1) == 30) and np.all(w == np.round(w))


def test_unit_weights_reproduce_point_estimate(small_scenario):
    d = small_scenario
    est = fit(d.cohort, d.census, SPEC)
    rep = perturbed_fit(d.cohort, d.census, SPEC, np.ones(d.cohort.n_subjects))
    np.testing.assert_allclose(rep.beta, est.params.beta, atol=1e-12)


def test_zero_weight_equals_dropping_subject(small_scenario):
    d = small_scenario
    spec = ModelSpec(tolerance=1e-9, max_iterations=200)
    w = np.ones(d.cohort.n_subjects)
    w[7] = 0.0
    rep = perturbed_fit(d.cohort, d.census, spec, w)
    keep = [i for i in range(d.cohort.n_subjects) if i != 7]
    ref = fit(d.cohort.subset(keep), d.census, spec)
    np.testing.assert_allclose(rep.beta, ref.params.beta, atol=1e-8)


def test_bootstrap_identity_resample(small_scenario):
    # the replicate restarts at the estimate, so it agrees to the convergence tolerance
    d = small_scenario
    spec = ModelSpec(tolerance=1e-10, max_iterations=200)
    est = fit(d.cohort, d.census, spec)
    reps = bootstrap(d.cohort, d.census, spec, B=1, seed=0, estimate=est,
                     resampler=lambda rng, n: np.arange(n))
    np.testing.assert_allclose(reps.beta[0], est.params.beta, atol=1e-8)


def test_subject_atomicity(small_scenario):
    d = small_scenario
    w = bootstrap_weights(d.cohort.n_subjects, 3, seed=2)
    eq = EstimatingEquations(d.cohort, d.census, SPEC, weights=w)
    # each event carries its subject's draw count
    np.testing.assert_array_equal(eq.event_w, w[:, d.cohort.event_subject])


def test_band_formulas():
    est = np.zeros((1, 3, 2))
    same = variance_bands(np.repeat(est[None] + 0.4, 5, axis=0), est)
    assert np.all(same.se == 0) and np.all(same.lower == same.upper)
    v = 0.3
    two = variance_bands(np.stack([est + v, est - v]), est)
    np.testing.assert_allclose(two.se ** 2, 2 * v * v)
    np.testing.assert_allclose(two.upper, 1.959963984540054 * np.sqrt(2) * v)
    with pytest.raises(InsufficientDataError):
        variance_bands(est[None], est)


def test_replicates_deterministic_across_workers(small_scenario):
    d = small_scenario
    est = fit(d.cohort, d.census, SPEC)
    plan = MultiplierPlan(replicates=60, seed=5)
    one = multiplier_replicates(d.cohort, d.census, SPEC, plan, est)
    again = multiplier_replicates(d.cohort, d.census, SPEC, plan, est)
    two = multiplier_replicates(d.cohort, d.census, SPEC, plan, est, n_jobs=2)
    np.testing.assert_array_equal(one.beta, again.beta)
    np.testing.assert_array_equal(one.beta, two.beta)
    assert one.dropped == 0 and one.beta.shape[0] == 60
    bands = variance_bands(one)
    assert np.all(bands.se[:, 15:96] > 0)


def test_one_step_replicates(small_scenario):
    d = small_scenario
    est = fit(d.cohort, d.census, SPEC)
    plan = MultiplierPlan(replicates=20, seed=5)
    full = multiplier_replicates(d.cohort, d.census, SPEC, plan, est)
    quick = multiplier_replicates(d.cohort, d.census, SPEC, plan, est, one_step=True)
    se_full = variance_bands(full).se[:, 15:96]
    se_quick = variance_bands(quick).se[:, 15:96]
    assert np.median(se_quick / se_full) == pytest.approx(1.0, abs=0.35)
