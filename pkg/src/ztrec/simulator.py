"""Synthetic populations with known ground truth.

A population is born uniformly over ``[W_L - A*, W_R]`` (calendar years,
``W_L = 0``), has covariates ``Z1 ~ Bernoulli(0.5)``, ``Z2 = I(5 < X <= 13)``,
``Z3 = I(X > 13)`` with ``log X ~ N(log 8, (log 3)^2)``, and event histories
from the stratified intensity model. Only subjects with at least one event
inside their observation window enter the cohort; every subject enters the
census.

Random streams are keyed by ``(seed, stream, chunk)`` with a fixed chunk
size, so results do not depend on how chunks are scheduled.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .census import BIN_YEARS, CensusTable
from .errors import ConfigurationError, FitError
from .model import AgeGrid, Cohort, CovariateSpace, StepFunctionSet, StratificationRule, SubjectRecord

CHUNK = 4096
STREAM_COVARIATES, STREAM_WINDOWS, STREAM_EVENTS = 0, 1, 2

COVARIATE_NAMES = ("z1", "z2", "z3")
COVARIATE_SPACE = CovariateSpace.from_levels(COVARIATE_NAMES, [[0, 1], [0, 1], [0, 1]],
                                             exclusive=[(1, 2)])


def _rng(seed: int, stream: int, chunk: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(
        int(seed), spawn_key=(stream, chunk))))


def _chunks(n: int):
    return [(c, c * CHUNK, min(n, (c + 1) * CHUNK)) for c in range(math.ceil(n / CHUNK))]


def load_scenario_config() -> dict:
    text = resources.files("ztrec").joinpath("data/scenarios.json").read_text()
    return json.loads(text)


def truth_from_config(entry: dict, grid: AgeGrid) -> StepFunctionSet:
    """Evaluate configured truth functions at the grid midpoints."""
    years = grid.to_years(grid.midpoints)
    x = years / grid.a_star_years
    base, beta = [], []
    for b in entry["baselines"]:
        base.append(np.interp(years, b["knots"], b["rates"]) * grid.unit_length)
    for c in entry["coefficients"]:
        comps = [np.asarray(c[k], dtype=float) for k in ("intercept", "slope", "amplitude")]
        beta.append(comps[0] + np.outer(x, comps[1]) + np.outer(np.sin(2 * np.pi * x), comps[2]))
    return StepFunctionSet(grid, np.array(beta), np.array(base))


@dataclass(frozen=True)
class ScenarioSpec:
    """Settings of one synthetic population.

    ``truth`` defaults to the shipped configuration of ``scenario``; the
    stratification rule is the first-event rule when the truth has two
    strata and the trivial rule when it has one.
    """

    scenario: int = 2
    population_size: int = 200_000
    window_years: float = 7.0
    seed: int = 0
    start_year: int = 2010
    census_resolution: str = "yearly"
    grid: AgeGrid = field(default_factory=AgeGrid)
    truth: StepFunctionSet | None = None
    rule: StratificationRule | None = None
    p_z1: float = 0.5
    log_x_mean: float = math.log(8.0)
    log_x_sd: float = math.log(3.0)
    x_cuts: tuple[float, float] = (5.0, 13.0)

    def __post_init__(self):
        if self.population_size < 1:
            raise ConfigurationError("population_size must be >= 1")
        if not self.window_years > 0:
            raise ConfigurationError("window_years must be positive")
        if self.census_resolution not in BIN_YEARS:
            raise ConfigurationError(f"unknown census resolution {self.census_resolution!r}")
        if self.truth is None:
            cfg = load_scenario_config()["scenarios"]
            if str(self.scenario) not in cfg:
                raise ConfigurationError(f"unknown scenario {self.scenario}")
            object.__setattr__(self, "truth", truth_from_config(cfg[str(self.scenario)], self.grid))
        if self.rule is None:
            rule = (StratificationRule.first_event() if self.truth.n_strata == 2
                    else StratificationRule.trivial() if self.truth.n_strata == 1
                    else StratificationRule.event_count(self.truth.n_strata))
            object.__setattr__(self, "rule", rule)
        if self.rule.n_strata != self.truth.n_strata:
            raise ConfigurationError("truth and rule disagree on the number of strata")


@dataclass
class Population:
    """Every simulated subject with full event histories."""

    Z: np.ndarray             # (n, p)
    birth: np.ndarray         # calendar years relative to W_L
    c_left: np.ndarray        # grid units
    c_right: np.ndarray
    event_subject: np.ndarray
    event_age: np.ndarray     # all events on (0, A*], grid units
    spec: ScenarioSpec

    @property
    def size(self) -> int:
        return self.Z.shape[0]


def gen_covariates(n: int, seed: int, p_z1: float = 0.5, log_x_mean: float = math.log(8.0),
                   log_x_sd: float = math.log(3.0), cuts=(5.0, 13.0)) -> np.ndarray:
    """Covariates ``(Z1, Z2, Z3)`` for ``n`` subjects."""
    if n < 1:
        raise ConfigurationError("n must be >= 1")
    out = np.empty((n, 3))
    for c, lo, hi in _chunks(n):
        rng = _rng(seed, STREAM_COVARIATES, c)
        m = hi - lo
        z1 = rng.random(m) < p_z1
        x = np.exp(rng.normal(log_x_mean, log_x_sd, m))
        out[lo:hi, 0] = z1
        out[lo:hi, 1] = (x > cuts[0]) & (x <= cuts[1])
        out[lo:hi, 2] = x > cuts[1]
    return out


def gen_windows(n: int, window_years: float, seed: int, grid: AgeGrid | None = None):
    """Birthdates and per-subject observation windows.

    Returns ``(c_left, c_right, birth_in_window, birth)`` with the windows in
    grid units and birthdates in calendar years relative to ``W_L = 0``.
    """
    grid = grid or AgeGrid()
    a_star = grid.a_star_years
    birth = np.empty(n)
    for c, lo, hi in _chunks(n):
        birth[lo:hi] = _rng(seed, STREAM_WINDOWS, c).uniform(-a_star, window_years, hi - lo)
    return (*window_from_birth(birth, window_years, grid), birth)


def window_from_birth(birth, window_years: float, grid: AgeGrid):
    """``C_L = max(0, W_L - B)``, ``C_R = min(A*, W_R - B)`` in grid units."""
    birth = np.asarray(birth, dtype=float)
    c_left = grid.from_years(np.maximum(0.0, -birth))
    c_right = grid.from_years(np.minimum(grid.a_star_years, window_years - birth))
    return c_left, c_right, c_left == 0


def _thin_chunk(args):
    seed, chunk, rates, majorant, cells, rule, a_star = args
    rng = _rng(seed, STREAM_EVENTS, chunk)
    n = cells.size
    t = np.zeros(n)
    count = np.zeros(n, dtype=int)
    alive = np.arange(n)
    subj_out, age_out = [], []
    G = rates.shape[2]
    while alive.size:
        s = rule.stratum_from_count(count[alive]) - 1
        bound = majorant[s, cells[alive]]
        with np.errstate(divide="ignore"):
            gap = rng.exponential(1.0, alive.size) / bound
        cand = t[alive] + gap
        u = rng.random(alive.size)
        inside = cand <= a_star
        k = np.minimum(np.floor(cand[inside]).astype(int), G - 1)
        acc = np.zeros(alive.size, dtype=bool)
        acc[inside] = u[inside] * bound[inside] < rates[s[inside], cells[alive][inside], k]
        t[alive] = cand
        subj_out.append(alive[acc])
        age_out.append(cand[acc])
        count[alive[acc]] += 1
        alive = alive[inside]
    subj = np.concatenate(subj_out) if subj_out else np.zeros(0, dtype=int)
    ages = np.concatenate(age_out) if age_out else np.zeros(0)
    order = np.lexsort((ages, subj))
    return subj[order], ages[order]


def gen_events(cells, truth: StepFunctionSet, rule: StratificationRule, seed: int,
               covariates=None, n_jobs: int = 1):
    """Event ages on ``(0, A*]`` by sequential thinning.

    ``cells`` are covariate-cell indices into ``covariates`` (an array of
    cell vectors; defaults to the three-indicator space). The majorant is
    the maximum intensity of the current stratum over the grid. Returns
    flat ``(subject, age)`` arrays sorted by subject then age.
    """
    cells = np.asarray(cells, dtype=int)
    space_cells = COVARIATE_SPACE.cells if covariates is None else np.atleast_2d(covariates)
    eta = np.einsum("sgp,zp->szg", truth.beta, space_cells)
    rates = truth.baseline[:, None, :] * np.exp(eta)
    majorant = rates.max(axis=2)
    jobs = [(seed, c, rates, majorant, cells[lo:hi], rule, truth.grid.a_star)
            for c, lo, hi in _chunks(cells.size)]
    if n_jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(n_jobs) as ex:
            parts = list(ex.map(_thin_chunk, jobs))
    else:
        parts = [_thin_chunk(j) for j in jobs]
    subj = np.concatenate([p[0] + lo for p, (_, lo, _) in zip(parts, _chunks(cells.size))])
    ages = np.concatenate([p[1] for p in parts])
    return subj, ages


def simulate_population(spec: ScenarioSpec, n_jobs: int = 1) -> Population:
    n = spec.population_size
    Z = gen_covariates(n, spec.seed, spec.p_z1, spec.log_x_mean, spec.log_x_sd, spec.x_cuts)
    c_left, c_right, _, birth = gen_windows(n, spec.window_years, spec.seed, spec.grid)
    cells = COVARIATE_SPACE.indices_of(Z) if n else np.zeros(0, dtype=int)
    subj, ages = gen_events(cells, spec.truth, spec.rule, spec.seed, n_jobs=n_jobs)
    return Population(Z, birth, c_left, c_right, subj, ages, spec)


def census_from_population(pop: Population) -> CensusTable:
    """Period-by-cell-by-age-bin census of every subject in the population.

    ``C(l, z, y)`` is the time subject-years spent at age bin ``y`` during
    calendar year ``l`` inside the observation window, divided by the bin
    width, so that summing over periods estimates the number at risk.
    """
    spec = pop.spec
    grid = spec.grid
    b = BIN_YEARS[spec.census_resolution]
    a_star = grid.a_star_years
    n_periods = int(math.ceil(spec.window_years - 1e-9))
    n_bins = int(math.ceil(a_star / b - 1e-9))
    cells = COVARIATE_SPACE.indices_of(pop.Z)
    counts = np.zeros((n_periods, len(COVARIATE_SPACE), n_bins))
    lo_win = grid.to_years(pop.c_left)
    hi_win = grid.to_years(pop.c_right)
    span = int(math.ceil(1.0 / b)) + 1
    for l in range(n_periods):
        x0 = np.maximum(l - pop.birth, lo_win)
        x1 = np.minimum(np.minimum(l + 1.0, spec.window_years) - pop.birth, hi_win)
        live = x1 > x0
        x0, x1, cz = x0[live], x1[live], cells[live]
        first = np.floor(x0 / b).astype(int)
        for j in range(span):
            y = first + j
            ov = np.minimum(x1, (y + 1) * b) - np.maximum(x0, y * b)
            ok = (ov > 0) & (y < n_bins)
            np.add.at(counts[l], (cz[ok], y[ok]), ov[ok] / b)
    periods = [spec.start_year + l for l in range(n_periods)]
    return CensusTable(periods, COVARIATE_SPACE, counts, spec.census_resolution, grid)


def truncate_and_census(pop: Population):
    """Zero-truncated cohort (in-window events only) and the matching census."""
    subj, ages = pop.event_subject, pop.event_age
    inside = (ages > pop.c_left[subj]) & (ages <= pop.c_right[subj])
    observed = np.unique(subj[inside])
    if observed.size == 0:
        raise FitError("empty cohort: no subject has an event inside its window")
    prior = np.bincount(subj[ages <= pop.c_left[subj]], minlength=pop.size)
    starts = np.searchsorted(subj[inside], observed, side="left")
    stops = np.searchsorted(subj[inside], observed, side="right")
    in_ages = ages[inside]
    width = len(str(pop.size))
    records = [SubjectRecord(f"S{i:0{width}d}", float(pop.c_left[i]), float(pop.c_right[i]),
                             tuple(in_ages[a:b]), tuple(pop.Z[i]), int(prior[i]))
               for i, a, b in zip(observed, starts, stops)]
    cohort = Cohort(records, COVARIATE_SPACE, pop.spec.grid)
    return cohort, census_from_population(pop)


@dataclass
class SimulatedData:
    cohort: Cohort
    census: CensusTable
    truth: StepFunctionSet
    rule: StratificationRule
    population_size: int

    @property
    def cohort_fraction(self) -> float:
        return self.cohort.n_subjects / self.population_size


def simulate(spec: ScenarioSpec, n_jobs: int = 1) -> SimulatedData:
    pop = simulate_population(spec, n_jobs=n_jobs)
    cohort, census = truncate_and_census(pop)
    return SimulatedData(cohort, census, spec.truth, spec.rule, pop.size)
