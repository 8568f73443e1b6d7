"""Core data model: age grid, subjects, covariate space, stratification and
the stratified intensity model with time-varying coefficients.

All ages are expressed in grid units (``AgeGrid.unit_length`` years per unit).
Strata are numbered from 1, as in the model notation.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, DomainError

CovariateVector = tuple[float, ...]

MODEL_NAMES = ("NNC", "SNC", "NSC", "SSC", "NNV", "SNV", "NSV", "SSV")


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class AgeGrid:
    """Uniform discretization of age into cells of ``unit_length`` years.

    Cell ``k`` covers ``[k, k + 1)`` in grid units; its midpoint ``k + 0.5``
    is the evaluation point. Every integral over age is a midpoint-rule sum.
    """

    unit_length: float = 1.0 / 6.0
    max_age_units: int = 108

    def __post_init__(self):
        if not self.unit_length > 0:
            raise ConfigurationError("unit_length must be positive")
        if int(self.max_age_units) != self.max_age_units or self.max_age_units < 1:
            raise ConfigurationError("max_age_units must be a positive integer")

    @property
    def a_star(self) -> float:
        """Upper age limit in grid units."""
        return float(self.max_age_units)

    @property
    def a_star_years(self) -> float:
        return self.max_age_units * self.unit_length

    @property
    def n_cells(self) -> int:
        return int(self.max_age_units)

    @property
    def midpoints(self) -> np.ndarray:
        return np.arange(self.n_cells) + 0.5

    @property
    def edges(self) -> np.ndarray:
        return np.arange(self.n_cells + 1, dtype=float)

    def cell_index(self, a) -> np.ndarray:
        """Index of the cell containing age ``a``; ``a = A*`` maps to the last cell."""
        idx = np.floor(np.asarray(a, dtype=float)).astype(int)
        return np.clip(idx, 0, self.n_cells - 1)

    def to_years(self, a):
        return np.asarray(a, dtype=float) * self.unit_length

    def from_years(self, years):
        return np.asarray(years, dtype=float) / self.unit_length


@dataclass(frozen=True)
class StratificationRule:
    """Maps the number of strictly prior events to a stratum.

    ``trivial`` has one stratum; ``first_event`` puts subjects in stratum 1
    until their first event and in stratum 2 afterwards; ``event_count``
    gives ``min(N(a-), cap - 1) + 1``.
    """

    kind: str = "first_event"
    cap: int = 2

    def __post_init__(self):
        if self.kind not in ("trivial", "first_event", "event_count"):
            raise ConfigurationError(f"unknown stratification kind {self.kind!r}")
        if self.kind == "event_count" and self.cap < 2:
            raise ConfigurationError("event_count rule needs cap >= 2")

    @classmethod
    def trivial(cls) -> "StratificationRule":
        return cls("trivial", 1)

    @classmethod
    def first_event(cls) -> "StratificationRule":
        return cls("first_event", 2)

    @classmethod
    def event_count(cls, cap: int = 5) -> "StratificationRule":
        return cls("event_count", cap)

    @property
    def n_strata(self) -> int:
        if self.kind == "trivial":
            return 1
        if self.kind == "first_event":
            return 2
        return self.cap

    def stratum_from_count(self, n_prior):
        """Stratum (1-based) for ``n_prior`` events strictly before the age."""
        n = np.asarray(n_prior)
        return np.minimum(n, self.n_strata - 1) + 1


def stratum_at(history: Sequence[float], a: float, rule: StratificationRule,
               a_star: float = 108.0) -> int:
    """Stratum occupied at age ``a`` given the event ages in ``history``.

    Only events strictly before ``a`` count, so the result is left-continuous.
    """
    if not 0.0 < a <= a_star:
        raise DomainError(f"age {a} outside (0, {a_star}]")
    n_prior = int(np.searchsorted(np.asarray(history, dtype=float), a, side="left"))
    return int(rule.stratum_from_count(n_prior))


@dataclass(frozen=True)
class ModelSpec:
    """Selects one of the eight submodels and the estimation settings.

    The three booleans map to the model name letters: baseline stratified
    (first letter S/N), coefficients stratified (second letter S/N),
    time-varying coefficients (V) or constant (C).
    """

    baseline_stratified: bool = True
    coef_stratified: bool = True
    coef_time_varying: bool = True
    stratification: StratificationRule = field(default_factory=StratificationRule.first_event)
    bandwidth_units: float = 9.0
    tau_left_units: float = 6.0
    tau_right_units: float = 105.0
    tolerance: float = 1e-4
    max_iterations: int = 50
    kernel: str = "epanechnikov"
    grid: AgeGrid = field(default_factory=AgeGrid)

    def __post_init__(self):
        if not self.bandwidth_units > 0:
            raise ConfigurationError("bandwidth must be positive")
        if not 0 < self.tau_left_units < self.tau_right_units < self.grid.a_star:
            raise ConfigurationError("need 0 < tau_left < tau_right < A*")
        if not self.tolerance > 0:
            raise ConfigurationError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ConfigurationError("max_iterations must be >= 1")
        if self.kernel not in ("epanechnikov", "uniform"):
            raise ConfigurationError(f"unknown kernel {self.kernel!r}")

    @classmethod
    def from_name(cls, name: str, **kwargs) -> "ModelSpec":
        name = name.upper()
        if name not in MODEL_NAMES:
            raise ConfigurationError(f"unknown model {name!r}; expected one of {MODEL_NAMES}")
        return cls(baseline_stratified=name[0] == "S",
                   coef_stratified=name[1] == "S",
                   coef_time_varying=name[2] == "V", **kwargs)

    @property
    def name(self) -> str:
        return ("S" if self.baseline_stratified else "N") + \
               ("S" if self.coef_stratified else "N") + \
               ("V" if self.coef_time_varying else "C")

    @property
    def effective_rule(self) -> StratificationRule:
        # NN models ignore history entirely
        if not (self.baseline_stratified or self.coef_stratified):
            return StratificationRule.trivial()
        return self.stratification

    @property
    def n_strata(self) -> int:
        return self.effective_rule.n_strata

    def solve_points(self) -> np.ndarray:
        """Grid midpoints in ``[tau_left, tau_right]`` where coefficients are solved."""
        mids = self.grid.midpoints
        return mids[(mids >= self.tau_left_units) & (mids <= self.tau_right_units)]


class StepFunctionSet:
    """Per-stratum piecewise-constant functions on an :class:`AgeGrid`.

    Parameters
    ----------
    grid : AgeGrid
    beta : array (S, G, p)
        Coefficients on each grid cell.
    baseline : array (S, G)
        Baseline intensity per grid unit on each cell.
    cumulative : array (S, G + 1), optional
        Cumulative baseline at the cell edges. Defaults to the running
        integral of ``baseline``.
    """

    def __init__(self, grid: AgeGrid, beta, baseline, cumulative=None):
        beta = np.asarray(beta, dtype=float)
        baseline = np.asarray(baseline, dtype=float)
        if beta.ndim != 3 or baseline.shape != beta.shape[:2]:
            raise ConfigurationError("beta must be (S, G, p) and baseline (S, G)")
        if beta.shape[1] != grid.n_cells:
            raise ConfigurationError("grid size mismatch")
        if not np.all(np.isfinite(beta)):
            raise DomainError("coefficients must be finite")
        if np.any(baseline < 0) or not np.all(np.isfinite(baseline)):
            raise DomainError("baseline intensities must be finite and non-negative")
        if cumulative is None:
            cumulative = np.concatenate(
                [np.zeros((baseline.shape[0], 1)), np.cumsum(baseline, axis=1)], axis=1)
        cumulative = np.asarray(cumulative, dtype=float)
        if cumulative.shape != (baseline.shape[0], grid.n_cells + 1):
            raise ConfigurationError("cumulative must be (S, G + 1)")
        if np.any(cumulative[:, 0] != 0) or np.any(np.diff(cumulative, axis=1) < 0):
            raise DomainError("cumulative baseline must start at 0 and be non-decreasing")
        self.grid = grid
        self.beta = _frozen(beta)
        self.baseline = _frozen(baseline)
        self.cumulative = _frozen(cumulative)

    @property
    def n_strata(self) -> int:
        return self.beta.shape[0]

    @property
    def dim(self) -> int:
        return self.beta.shape[2]

    def _check_stratum(self, s: int):
        if not 1 <= s <= self.n_strata:
            raise DomainError(f"stratum {s} undefined (have {self.n_strata})")

    def beta_at(self, s: int, a) -> np.ndarray:
        self._check_stratum(s)
        return self.beta[s - 1, self.grid.cell_index(a)]

    def baseline_at(self, s: int, a) -> np.ndarray:
        self._check_stratum(s)
        return self.baseline[s - 1, self.grid.cell_index(a)]

    def cumulative_at(self, s: int, a) -> np.ndarray:
        self._check_stratum(s)
        return np.interp(a, self.grid.edges, self.cumulative[s - 1])

    def with_updates(self, **kwargs) -> "StepFunctionSet":
        args = dict(beta=self.beta, baseline=self.baseline, cumulative=self.cumulative)
        args.update(kwargs)
        if "baseline" in kwargs and "cumulative" not in kwargs:
            args["cumulative"] = None
        return StepFunctionSet(self.grid, **args)

    @classmethod
    def constant(cls, grid: AgeGrid, n_strata: int, dim: int, rate: float,
                 beta: float = 0.0) -> "StepFunctionSet":
        return cls(grid, np.full((n_strata, grid.n_cells, dim), beta),
                   np.full((n_strata, grid.n_cells), rate))


def intensity(a: float, z, s: int, params: StepFunctionSet) -> float:
    """Conditional intensity ``lambda_0s(a) * exp(beta_s(a)' z)``."""
    z = np.asarray(z, dtype=float)
    return float(params.baseline_at(s, a) * np.exp(params.beta_at(s, a) @ z))


def enumerate_covariate_space(levels: Sequence[Sequence[float]],
                              exclusive: Iterable[Sequence[int]] = ()) -> list[CovariateVector]:
    """All covariate combinations, lexicographic in declaration order.

    ``exclusive`` lists groups of coordinate indices of which at most one may
    be nonzero (e.g. dummy codings of a single categorical variable).
    """
    levels = [list(lv) for lv in levels]
    if not levels or any(len(lv) == 0 for lv in levels):
        raise ConfigurationError("every covariate needs at least one declared level")
    groups = [tuple(g) for g in exclusive]
    cells = []
    for combo in itertools.product(*levels):
        if any(sum(1 for j in g if combo[j] != 0) > 1 for g in groups):
            continue
        cells.append(tuple(float(v) for v in combo))
    return cells


class CovariateSpace:
    """Finite set of covariate cells with names and a fast lookup."""

    def __init__(self, names: Sequence[str], cells: Sequence[Sequence[float]]):
        cells = np.atleast_2d(np.asarray(cells, dtype=float))
        if len(names) != cells.shape[1]:
            raise ConfigurationError("names and cell dimension disagree")
        if len({tuple(c) for c in cells}) != len(cells):
            raise ConfigurationError("duplicate covariate cells")
        self.names = tuple(names)
        self.cells = _frozen(cells)
        self._lookup = {tuple(c): k for k, c in enumerate(cells.tolist())}

    @classmethod
    def from_levels(cls, names: Sequence[str], levels, exclusive=()) -> "CovariateSpace":
        return cls(names, enumerate_covariate_space(levels, exclusive))

    @property
    def dim(self) -> int:
        return self.cells.shape[1]

    def __len__(self) -> int:
        return self.cells.shape[0]

    def index_of(self, z) -> int:
        key = tuple(float(v) for v in z)
        try:
            return self._lookup[key]
        except KeyError:
            raise DomainError(f"covariate cell {key} not in the declared space") from None

    def indices_of(self, Z) -> np.ndarray:
        return np.array([self.index_of(z) for z in np.atleast_2d(Z)], dtype=int)


@dataclass(frozen=True)
class SubjectRecord:
    """One cohort member: observation window, observed event ages, covariates.

    ``prior_event_count`` is the number of events before ``c_left`` when it
    is known (always 0 for subjects born inside the window; otherwise only
    available in simulations).
    """

    id: str
    c_left: float
    c_right: float
    event_ages: tuple[float, ...]
    covariates: CovariateVector
    prior_event_count: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "event_ages", tuple(float(u) for u in self.event_ages))
        object.__setattr__(self, "covariates", tuple(float(v) for v in self.covariates))
        if not 0 <= self.c_left < self.c_right:
            raise DomainError(f"subject {self.id}: need 0 <= c_left < c_right")
        ages = np.asarray(self.event_ages)
        if ages.size and np.any(np.diff(ages) <= 0):
            raise DomainError(f"subject {self.id}: tied or unsorted event ages")
        if ages.size and (ages[0] <= self.c_left or ages[-1] > self.c_right):
            raise DomainError(f"subject {self.id}: event outside (c_left, c_right]")
        if self.c_left == 0 and self.prior_event_count is None:
            object.__setattr__(self, "prior_event_count", 0)

    @property
    def birth_in_window(self) -> bool:
        return self.c_left == 0

    @property
    def n_observed(self) -> int:
        return len(self.event_ages)


def jitter_ties(ages: Sequence[float], unit: float = 1.0) -> list[float]:
    """Break ties deterministically: the k-th repeat of an age gets ``k * unit / 1000``."""
    eps = unit / 1000.0
    out, seen = [], {}
    for u in sorted(float(a) for a in ages):
        k = seen.get(u, 0)
        seen[u] = k + 1
        out.append(u + k * eps)
    if np.any(np.diff(out) <= 0):
        raise DomainError("jitter could not separate tied ages")
    return out


class Cohort:
    """Array view of a list of :class:`SubjectRecord`, used by the estimator.

    Events are stored flat, sorted by subject then age; ``event_subject``
    gives the owning subject and ``event_rank`` the 0-based position of the
    event among that subject's observed events.
    """

    def __init__(self, records: Sequence[SubjectRecord], space: CovariateSpace,
                 grid: AgeGrid | None = None):
        grid = grid or AgeGrid()
        if len(records) == 0:
            raise ConfigurationError("cohort is empty")
        self.records = tuple(records)
        self.space = space
        self.grid = grid
        n = len(records)
        self.ids = [r.id for r in records]
        self.c_left = np.array([r.c_left for r in records], dtype=float)
        self.c_right = np.array([r.c_right for r in records], dtype=float)
        if np.any(self.c_right > grid.a_star + 1e-9):
            raise DomainError("c_right exceeds A*")
        for r in records:
            if r.n_observed == 0:
                raise DomainError(f"subject {r.id} has no observed event (zero-truncation)")
        self.Z = np.array([r.covariates for r in records], dtype=float).reshape(n, space.dim)
        self.cell = space.indices_of(self.Z)
        self.prior_counts = np.array(
            [-1 if r.prior_event_count is None else r.prior_event_count for r in records], dtype=int)
        counts = np.array([r.n_observed for r in records], dtype=int)
        self.n_events = counts
        self.event_subject = np.repeat(np.arange(n), counts)
        self.event_age = np.concatenate([np.asarray(r.event_ages, dtype=float) for r in records])
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        self.event_rank = np.arange(self.event_age.size) - np.repeat(starts, counts)
        self.first_event_age = self.event_age[starts]

    def __len__(self) -> int:
        return len(self.records)

    @property
    def n_subjects(self) -> int:
        return len(self.records)

    @property
    def strata_known(self) -> bool:
        return bool(np.all(self.prior_counts >= 0))

    def subset(self, indices) -> "Cohort":
        return Cohort([self.records[i] for i in indices], self.space, self.grid)

    @classmethod
    def from_arrays(cls, ids, c_left, c_right, Z, events: Mapping[str, Sequence[float]],
                    space: CovariateSpace, grid: AgeGrid | None = None,
                    prior_counts=None) -> "Cohort":
        recs = []
        for k, sid in enumerate(ids):
            prior = None if prior_counts is None or prior_counts[k] < 0 else int(prior_counts[k])
            recs.append(SubjectRecord(str(sid), float(c_left[k]), float(c_right[k]),
                                      tuple(events[sid]), tuple(Z[k]), prior))
        return cls(recs, space, grid)
