import numpy as np
import pytest
from scipy.optimize import brentq

import oracles
from conftest import BINARY, flat_census, toy_cohort
from ztrec import (AgeGrid, CensusTable, Cohort, CovariateSpace, ModelSpec, StepFunctionSet,
                   StratificationRule, SubjectRecord, breslow_baseline, fit, fit_batch,
                   score_jacobian_at, score_known_strata, score_partial_strata, solve_beta_at)
from ztrec.errors import FitError, InsufficientDataError, RankDeficiencyError
from ztrec.estimator import EstimatingEquations, initial_params

GRID = AgeGrid()
SPEC = ModelSpec()

# five subjects, one binary covariate; two start observation after birth
TOY = [("a", 0.0, 60.0, (20.0, 33.0), (1.0,)),
       ("b", 0.0, 70.0, (24.5,), (0.0,)),
       ("c", 12.0, 54.0, (28.0, 41.0), (1.0,)),
       ("d", 18.0, 60.0, (30.5,), (0.0,)),
       ("e", 0.0, 50.0, (26.0, 29.0, 44.0), (0.0,))]
TOY_COUNTS = np.array([[300.0 + 10 * y for y in range(18)],
                       [200.0 + 25 * y for y in range(18)]])


def toy_census():
    return CensusTable([2015], BINARY, TOY_COUNTS[None], "yearly", GRID)


def toy_params():
    mids = GRID.midpoints
    base = np.stack([0.02 + 0.01 * np.sin(mids / 15), 0.05 + 0.0003 * mids])
    beta = np.stack([0.4 - mids / 150, -0.2 + 0.1 * np.cos(mids / 20)])[..., None]
    return StepFunctionSet(GRID, beta, base)


def toy_records():
    return [{"events": list(r[3]), "c_left": r[1], "z": r[4]} for r in TOY]


def oracle_score(gamma, a, s, params=None):
    params = params or toy_params()
    return oracles.score(gamma, a, s - 1, toy_records(), TOY_COUNTS, [[0.0], [1.0]],
                         params.beta, params.baseline)


@pytest.mark.parametrize("a", [22.5, 30.5, 33.5])
@pytest.mark.parametrize("s", [1, 2])
@pytest.mark.parametrize("gamma", [-1.3, 0.0, 0.7])
def test_score_matches_direct_summation(a, s, gamma):
    got = score_partial_strata([gamma], a, s, toy_cohort(TOY), toy_census(),
                               params=toy_params())
    np.testing.assert_allclose(got, oracle_score(gamma, a, s), rtol=0, atol=1e-12)


@pytest.mark.parametrize("a,s", [(27.5, 1), (31.5, 2)])
def test_newton_root_matches_grid_search(a, s):
    root = solve_beta_at(a, s, toy_cohort(TOY), toy_census(), params=toy_params())
    grid = np.arange(-5.0, 5.0 + 1e-9, 1e-4)
    vals = np.array([oracle_score(g, a, s)[0] for g in grid[::100]])
    # the score decreases in gamma: refine around the coarse sign change
    j = np.flatnonzero(np.diff(np.sign(vals)))[0]
    fine = grid[j * 100:(j + 1) * 100 + 1]
    fvals = np.array([oracle_score(g, a, s)[0] for g in fine])
    best = fine[np.argmin(np.abs(fvals))]
    assert abs(root[0] - best) <= 1e-3


def test_known_and_partial_scores_agree_on_indicator_probabilities(born_in_window):
    cohort, census = born_in_window
    params = initial_params(EstimatingEquations(cohort, census, SPEC))
    for a, s in ((30.5, 1), (60.5, 2)):
        g = np.array([0.1, -0.2, 0.3])
        np.testing.assert_allclose(
            score_known_strata(g, a, s, cohort, census, params=params),
            score_partial_strata(g, a, s, cohort, census, params=params), atol=1e-12)


def test_score_without_stratum_events_is_insufficient():
    probs = np.zeros(toy_cohort(TOY).event_age.size)
    with pytest.raises(InsufficientDataError):
        score_partial_strata([0.0], 30.5, 1, toy_cohort(TOY), toy_census(), probs=probs,
                             params=toy_params())


def test_score_single_cell_is_zero():
    space = CovariateSpace(["x"], [[1.0]])
    cohort = Cohort([SubjectRecord("a", 0.0, 60.0, (30.5,), (1.0,))], space)
    census = flat_census(space)
    assert score_partial_strata([0.4], 30.5, 1, cohort, census) == pytest.approx([0.0])
    with pytest.raises(RankDeficiencyError):
        solve_beta_at(30.5, 1, cohort, census)


def test_balanced_instance_root_is_zero():
    cohort = toy_cohort([("a", 0.0, 60.0, (30.25,), (0.0,)), ("b", 0.0, 60.0, (30.75,), (1.0,))])
    census = flat_census(BINARY, 500.0)
    # equal census counts and shared stratum probabilities give zbar(0) = 1/2
    assert score_partial_strata([0.0], 30.5, 1, cohort, census) == pytest.approx([0.0],
                                                                                  abs=1e-15)
    assert solve_beta_at(30.5, 1, cohort, census) == pytest.approx([0.0], abs=1e-10)


def test_jacobian_matches_finite_differences(small_scenario):
    cohort, census = small_scenario.cohort, small_scenario.census
    gamma = np.array([0.3, -0.4, 0.2])
    U, J = score_jacobian_at(gamma, 40.5, 1, cohort, census)
    fd = np.empty((3, 3))
    for k in range(3):
        e = np.zeros(3)
        e[k] = 1e-5
        fd[:, k] = (score_partial_strata(gamma + e, 40.5, 1, cohort, census)
                    - score_partial_strata(gamma - e, 40.5, 1, cohort, census)) / 2e-5
    assert np.abs(fd - J).max() <= 1e-4 * np.abs(J).max()
    # minus the Jacobian is a weighted covariance sum: positive definite here
    assert np.linalg.eigvalsh(-J).min() > 0


def test_breslow_single_event_jump():
    cohort = toy_cohort([("a", 0.0, 60.0, (30.5,), (1.0,))])
    census = flat_census(BINARY, 250.0)
    beta = np.zeros((2, GRID.n_cells, 1))
    cum = breslow_baseline(beta, 1, cohort, census)
    # stratum-1 census probabilities at the event cell
    params = initial_params(EstimatingEquations(cohort, census, SPEC)).with_updates(beta=beta)
    from ztrec import prob_stratum_given_covariate
    D = sum(prob_stratum_given_covariate(1, 30.5, z, params) * 250.0 for z in BINARY.cells)
    assert np.all(cum[:31] == 0)
    np.testing.assert_allclose(cum[31:], 1.0 / D, rtol=1e-12)
    assert np.all(breslow_baseline(beta, 2, cohort, census) == 0)


def test_trivial_rule_single_pass(born_in_window):
    cohort, census = born_in_window
    res = fit(cohort, census, ModelSpec.from_name("NNV"))
    assert res.iterations == 1 and res.converged


def test_one_stratum_reduction(small_scenario):
    d = small_scenario
    trivial = StratificationRule.trivial()
    fits = [fit(d.cohort, d.census, ModelSpec.from_name(n, stratification=trivial))
            for n in ("SSV", "NNV", "SNV", "NSV")]
    for f in fits[1:]:
        np.testing.assert_array_equal(f.params.beta, fits[0].params.beta)
        np.testing.assert_array_equal(f.params.cumulative, fits[0].params.cumulative)


@pytest.fixture(scope="module")
def ssv_fit(small_scenario):
    return fit(small_scenario.cohort, small_scenario.census, ModelSpec.from_name("SSV"))


def test_fit_result_invariants(ssv_fit):
    res = ssv_fit
    assert res.converged
    cum = res.cumulative_baselines
    assert np.all(cum[:, 0] == 0) and np.all(np.diff(cum, axis=1) >= 0)
    beta = res.coefficients
    # constant extension outside [tau_left, tau_right] = [6, 105]
    assert np.all(beta[:, :6] == beta[:, 6:7])
    assert np.all(beta[:, 105:] == beta[:, 104:105])
    diag = res.diagnostics()
    assert diag["iterations"] == res.iterations and diag["excluded_points"] == []


def test_known_strata_reduction(born_in_window):
    cohort, census = born_in_window
    est = fit(cohort, census, SPEC)
    known = fit(cohort, census, SPEC, known_strata=True)
    np.testing.assert_allclose(est.params.beta, known.params.beta, atol=1e-10, rtol=0)


def test_one_step_differs_from_converged(small_scenario, ssv_fit):
    d = small_scenario
    one = fit(d.cohort, d.census, ModelSpec(tolerance=float("inf")))
    assert one.iterations <= 2
    assert np.abs(one.params.beta - ssv_fit.params.beta).max() > 1e-3


def test_covariate_permutation_equivariance(small_scenario):
    d = small_scenario
    perm = [2, 0, 1]
    space = CovariateSpace([d.cohort.space.names[k] for k in perm],
                           np.asarray(d.cohort.space.cells)[:, perm])
    recs = [SubjectRecord(r.id, r.c_left, r.c_right, r.event_ages,
                          tuple(np.asarray(r.covariates)[perm]), r.prior_event_count)
            for r in d.cohort.records]
    census = CensusTable(d.census.periods, space, d.census.counts, d.census.resolution)
    spec = ModelSpec.from_name("SNV")
    a = fit(d.cohort, d.census, spec)
    b = fit(Cohort(recs, space), census, spec)
    np.testing.assert_allclose(b.params.beta, a.params.beta[..., perm], atol=1e-8)


def test_nnc_matches_pooled_constant_solver():
    cohort = toy_cohort(TOY)
    census = toy_census()
    res = fit(cohort, census, ModelSpec.from_name("NNC"))

    def pooled(g):
        total = 0.0
        for r in TOY:
            for u in r[3]:
                if 6.0 <= u <= 105.0:
                    y = int(u / 6)
                    w = TOY_COUNTS[:, y] * np.exp(g * np.array([0.0, 1.0]))
                    total += r[4][0] - w[1] / w.sum()
        return total

    root = brentq(pooled, -10, 10, xtol=1e-14)
    np.testing.assert_allclose(res.params.beta[0, :, 0], root, atol=1e-6)


def test_empty_second_stratum_is_flagged():
    recs = [(f"s{i}", 0.0, 80.0, (20.0 + 0.37 * i,), ((i % 2) * 1.0,)) for i in range(60)]
    res = fit(toy_cohort(recs), flat_census(BINARY, 400.0), SPEC)
    assert res.insufficient_strata == [2]
    assert np.all(np.isnan(res.coefficients[1])) and np.all(np.isfinite(res.coefficients[0]))


def test_all_points_insufficient_is_a_fit_error():
    recs = [(f"s{i}", 0.0, 20.0, (10.0 + 0.1 * i,), ((i % 2) * 1.0,)) for i in range(10)]
    spec = ModelSpec.from_name("NNV", tau_left_units=50.0, tau_right_units=60.0,
                               bandwidth_units=2.0)
    with pytest.raises(FitError):
        fit(toy_cohort(recs), flat_census(BINARY), spec)


def test_batch_equals_single_fit(small_scenario, ssv_fit):
    d = small_scenario
    n = d.cohort.n_subjects
    w = np.ones((2, n))
    w[1, :5] = 0.0
    batch = fit_batch(d.cohort, d.census, SPEC, w)
    np.testing.assert_allclose(batch.beta[0], ssv_fit.params.beta, atol=1e-12)
    single = fit(d.cohort, d.census, SPEC, weights=w[1])
    np.testing.assert_allclose(batch.beta[1], single.params.beta, atol=1e-12)
    assert batch.ok.all()


def test_nsv_and_ssv_both_run(small_scenario):
    d = small_scenario
    for name in ("NSV", "SNV", "SSC", "NNC", "SNC", "NSC"):
        res = fit(d.cohort, d.census, ModelSpec.from_name(name))
        assert np.all(np.isfinite(res.params.beta))


def test_separated_point_is_unidentified():
    # every event near age 30 comes from x = 1 while the census holds both
    # cells: the score stays positive and has no finite root
    records = [("a", 0.0, 60.0, (29.0, 31.0), (1.0,)),
               ("b", 0.0, 60.0, (30.2,), (1.0,)),
               ("c", 0.0, 90.0, (80.0,), (0.0,))]
    with pytest.raises(RankDeficiencyError, match="no finite root"):
        solve_beta_at(30.5, 1, toy_cohort(records), flat_census(BINARY), params=toy_params())
