import numpy as np
import pytest
from hypothesis import given, strategies as st

from ztrec import AgeGrid, CensusTable, CovariateSpace, at_risk_count, weighted_moment, zbar
from ztrec.errors import ConfigurationError, DomainError
from ztrec.simulator import COVARIATE_SPACE, ScenarioSpec, census_from_population, \
    simulate_population

SEX_REGION = CovariateSpace.from_levels(["female", "edmonton", "calgary"],
                                        [[0, 1], [0, 1], [0, 1]], exclusive=[(1, 2)])


def test_at_risk_single_period():
    entries = {(2013, (1.0, 1.0, 0.0), y): 128545.0 for y in range(18)}
    table = CensusTable.from_entries(entries, SEX_REGION)
    assert at_risk_count(table, (1, 1, 0), 40.0) == 128545.0
    assert at_risk_count(table, (0, 1, 0), 40.0) == 0.0


def test_at_risk_sums_periods_and_empty_table():
    space = CovariateSpace(["x"], [[0.0], [1.0]])
    table = CensusTable.from_entries({(1, (1.0,), 3): 100.0, (2, (1.0,), 3): 150.0}, space)
    # 3 years = 18 units; any age in [18, 24) floors to bin 3
    assert at_risk_count(table, (1,), 20.0) == 250.0
    empty = CensusTable([], space, np.zeros((0, 2, 18)))
    assert at_risk_count(empty, (1,), 20.0) == 0.0
    with pytest.raises(DomainError):
        at_risk_count(table, (2,), 20.0)
    with pytest.raises(DomainError):
        at_risk_count(table, (1,), 0.0)


def test_age_flooring_by_resolution():
    space = CovariateSpace(["x"], [[0.0]])
    yearly = CensusTable([1], space, np.zeros((1, 1, 18)), "yearly")
    monthly = CensusTable([1], space, np.zeros((1, 1, 216)), "monthly")
    assert yearly.age_bin(6.0) == 1 and yearly.age_bin(5.99) == 0
    assert monthly.age_bin(0.5) == 1 and monthly.age_bin(6.0) == 12
    with pytest.raises(ConfigurationError):
        CensusTable([1], space, np.zeros((1, 1, 18)), "weekly")
    with pytest.raises(DomainError):
        CensusTable([1], space, -np.ones((1, 1, 18)))


def test_moment_examples():
    table = CensusTable.from_entries({(1, (0.0,), y): 50.0 for y in range(18)}
                                     | {(1, (1.0,), y): 70.0 for y in range(18)},
                                     CovariateSpace(["x"], [[0.0], [1.0]]))
    assert weighted_moment(table, [1, 1], [0.0], 10.0, 0) == pytest.approx(120.0)
    one = CensusTable.from_entries({(1, (1.0,), 0): 200.0}, CovariateSpace(["x"], [[1.0]]))
    assert weighted_moment(one, [0.5], [np.log(2)], 1.0, 1) == pytest.approx([200.0])
    with pytest.raises(DomainError):
        weighted_moment(table, [1, -0.1], [0.0], 10.0, 0)
    with pytest.raises(DomainError):
        weighted_moment(table, [1, 1], [0.0], 10.0, 3)


def test_zbar_examples():
    space = CovariateSpace(["x"], [[0.0], [1.0]])
    table = CensusTable.from_entries({(1, (0.0,), 2): 80.0, (1, (1.0,), 2): 80.0}, space)
    assert zbar(table, [0.3, 0.3], [0.0], 13.0) == pytest.approx([0.5])
    assert zbar(table, [1, 1], [20.0], 13.0) == pytest.approx([1.0], abs=1e-6)
    assert zbar(table, [1, 1], [0.0], 50.0) is None
    single = CensusTable.from_entries({(1, (1.0, 0.0, 1.0), 2): 9.0},
                                      CovariateSpace(["a", "b", "c"], [[1.0, 0.0, 1.0]]))
    assert zbar(single, [0.4], [1.0, 2.0, 3.0], 13.0) == pytest.approx([1.0, 0.0, 1.0])


cells3 = np.asarray(COVARIATE_SPACE.cells)


@given(st.lists(st.floats(0, 500), min_size=6, max_size=6),
       st.lists(st.floats(0.01, 1), min_size=6, max_size=6),
       st.lists(st.floats(-3, 3), min_size=3, max_size=3))
def test_zbar_in_hull_and_covariance_psd(counts, probs, gamma):
    entries = {(1, tuple(c), 4): n for c, n in zip(cells3, counts)}
    table = CensusTable.from_entries(entries, COVARIATE_SPACE)
    m0 = weighted_moment(table, probs, gamma, 25.0, 0)
    if m0 <= 1e-9:
        return
    zb = zbar(table, probs, gamma, 25.0)
    assert np.all(zb >= -1e-12) and np.all(zb <= 1 + 1e-12)
    assert zb[1] + zb[2] <= 1 + 1e-12  # hull of the cells: z2 + z3 <= 1
    cov = weighted_moment(table, probs, gamma, 25.0, 2) / m0 - np.outer(zb, zb)
    assert np.linalg.eigvalsh(cov).min() >= -1e-9


def test_monthly_aggregating_to_yearly_gives_same_moments():
    rng = np.random.default_rng(4)
    space = CovariateSpace(["x"], [[0.0], [1.0]])
    monthly = rng.uniform(0, 10, (1, 2, 216))
    yearly = monthly.reshape(1, 2, 18, 12).sum(axis=3)
    tm = CensusTable([1], space, monthly, "monthly")
    ty = CensusTable([1], space, yearly, "yearly")
    # with a month count equal to the year's average, flooring to either bin gives one answer
    flat = np.repeat(yearly / 12.0, 12, axis=2)
    tf = CensusTable([1], space, flat, "monthly")
    for u in (3.2, 40.7, 100.1):
        assert weighted_moment(tf, [1, 1], [0.3], u, 1) * 12 == \
            pytest.approx(weighted_moment(ty, [1, 1], [0.3], u, 1))
    assert tm.counts.sum() == pytest.approx(ty.counts.sum())


def test_census_matches_independent_tally():
    pop = simulate_population(ScenarioSpec(population_size=3000, seed=8))
    table = census_from_population(pop)
    grid = pop.spec.grid
    # independent pass: step through each subject's window in fine slices of age
    tally = np.zeros_like(table.counts)
    cells = COVARIATE_SPACE.indices_of(pop.Z)
    lo, hi = grid.to_years(pop.c_left), grid.to_years(pop.c_right)
    for i in range(pop.size):
        if hi[i] <= lo[i]:
            continue
        cuts = np.unique(np.concatenate([[lo[i], hi[i]], np.arange(np.ceil(lo[i]), hi[i]),
                                         np.arange(0, 8) - pop.birth[i]]))
        cuts = cuts[(cuts >= lo[i]) & (cuts <= hi[i])]
        for x0, x1 in zip(cuts[:-1], cuts[1:]):
            mid = 0.5 * (x0 + x1)
            period = int(np.floor(pop.birth[i] + mid))
            if 0 <= period < tally.shape[0]:
                tally[period, cells[i], int(np.floor(mid))] += x1 - x0
    np.testing.assert_allclose(table.counts, tally, atol=1e-9)
    # marginal total: person-years lived inside the window by the whole population
    assert table.counts.sum() == pytest.approx(np.clip(hi - lo, 0, None).sum(), rel=1e-12)
