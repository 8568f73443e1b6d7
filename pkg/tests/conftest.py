import numpy as np
import pytest
from hypothesis import settings

from ztrec import AgeGrid, CensusTable, Cohort, CovariateSpace, SubjectRecord
from ztrec.simulator import ScenarioSpec, simulate

settings.register_profile("ztrec", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("ztrec")

BINARY = CovariateSpace(["x"], [[0.0], [1.0]])


def flat_census(space, count=100.0, grid=None, periods=(2010,)):
    """Census with the same count in every period, cell and yearly age bin."""
    grid = grid or AgeGrid()
    probe = CensusTable(list(periods), space, np.zeros((len(periods), len(space), 18)),
                        "yearly", grid)
    counts = np.full((len(periods), len(space), probe.n_bins), float(count))
    return CensusTable(list(periods), space, counts, "yearly", grid)


def toy_cohort(records, space=BINARY):
    return Cohort([SubjectRecord(*r) for r in records], space)


@pytest.fixture(scope="session")
def small_scenario():
    """Scenario 2 population of 5,000 (about 600 cohort members)."""
    return simulate(ScenarioSpec(population_size=5000, seed=11))


@pytest.fixture(scope="session")
def born_in_window():
    """Cohort where every subject has c_left = 0, with its census."""
    data = simulate(ScenarioSpec(population_size=20000, window_years=18.0, seed=5))
    keep = [i for i, r in enumerate(data.cohort.records) if r.c_left == 0]
    return data.cohort.subset(keep), data.census
