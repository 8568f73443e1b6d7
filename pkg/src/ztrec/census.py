"""Aggregate census counts and the census-approximated risk-set moments."""

from __future__ import annotations

import math
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, DomainError
from .model import AgeGrid, CovariateSpace

BIN_YEARS = {"yearly": 1.0, "monthly": 1.0 / 12.0, "daily": 1.0 / 365.25}


class CensusTable:
    """Counts ``C(l, z, y)`` by record period, covariate cell and age bin.

    A count is the number of individuals of cell ``z`` at age bin ``y`` during
    period ``l``; non-integer counts are accepted. The age bin width follows
    ``resolution`` (years for ``"yearly"``, months for ``"monthly"``, ...).

    Parameters
    ----------
    periods : sequence
        Period labels, in the order of the first axis of ``counts``.
    space : CovariateSpace
    counts : array (L, Z, Y)
    resolution : {"yearly", "monthly", "daily"}
    grid : AgeGrid
        Converts estimator ages (grid units) into age bins.
    """

    def __init__(self, periods: Sequence, space: CovariateSpace, counts,
                 resolution: str = "yearly", grid: AgeGrid | None = None):
        if resolution not in BIN_YEARS:
            raise ConfigurationError(f"unknown census resolution {resolution!r}")
        self.grid = grid or AgeGrid()
        self.resolution = resolution
        self.bin_years = BIN_YEARS[resolution]
        self.n_bins = int(math.ceil(self.grid.a_star_years / self.bin_years - 1e-9))
        counts = np.asarray(counts, dtype=float)
        if counts.shape != (len(periods), len(space), self.n_bins):
            raise ConfigurationError(
                f"counts shape {counts.shape} != {(len(periods), len(space), self.n_bins)}")
        if np.any(counts < 0) or not np.all(np.isfinite(counts)):
            raise DomainError("census counts must be finite and non-negative")
        self.periods = tuple(periods)
        self.space = space
        self.counts = counts
        self.counts.setflags(write=False)
        # counts summed over periods, shape (Z, Y)
        self.pooled = self.counts.sum(axis=0)

    @classmethod
    def from_entries(cls, entries: Mapping[tuple, float], space: CovariateSpace,
                     resolution: str = "yearly", grid: AgeGrid | None = None,
                     periods: Sequence | None = None) -> "CensusTable":
        """Build from ``{(period, z, age_bin): count}``; repeated keys are summed."""
        grid = grid or AgeGrid()
        n_bins = int(math.ceil(grid.a_star_years / BIN_YEARS[resolution] - 1e-9))
        if periods is None:
            periods = sorted({k[0] for k in entries})
        pidx = {p: i for i, p in enumerate(periods)}
        counts = np.zeros((len(periods), len(space), n_bins))
        for (period, z, y), c in entries.items():
            if not 0 <= int(y) < n_bins:
                raise DomainError(f"age bin {y} outside [0, {n_bins})")
            counts[pidx[period], space.index_of(z), int(y)] += c
        return cls(periods, space, counts, resolution, grid)

    def age_bin(self, u) -> np.ndarray:
        """Census age bin ``floor(u)`` at the table resolution, ``u`` in grid units."""
        x = np.asarray(u, dtype=float) * self.grid.unit_length / self.bin_years
        # rounding guards exact multiples such as 6 units -> 1.0 year
        return np.clip(np.floor(np.round(x, 9)).astype(int), 0, self.n_bins - 1)

    def at_risk_matrix(self, u) -> np.ndarray:
        """Period-summed counts for every cell, shape ``(len(u), Z)``."""
        return self.pooled[:, self.age_bin(np.atleast_1d(u))].T

    def total_person_units(self) -> float:
        """Census at-risk count integrated over the age grid (grid units)."""
        return float(self.at_risk_matrix(self.grid.midpoints).sum())


def at_risk_count(table: CensusTable, z, u: float) -> float:
    """``sum_l C(l, z, floor(u))``: estimated number at risk in cell ``z`` at age ``u``."""
    if not 0 < u < table.grid.a_star:
        raise DomainError(f"age {u} outside (0, A*)")
    k = table.space.index_of(z)
    if not table.periods:
        return 0.0
    return float(table.pooled[k, table.age_bin(u)])


def _moments(cells, weights, gamma):
    """Weighted moments of orders 0, 1, 2 over cells with weights * exp(gamma'z)."""
    cells = np.asarray(cells, dtype=float)
    w = np.asarray(weights, dtype=float) * np.exp(cells @ np.asarray(gamma, dtype=float))
    m0 = w.sum()
    m1 = w @ cells
    m2 = (cells * w[:, None]).T @ cells
    return m0, m1, m2


def weighted_moment(table: CensusTable, strata_probs, gamma, u: float, q: int):
    """``sum_z P(stratum | z) z^{(x)q} exp(gamma'z) sum_l C(l, z, floor(u))``.

    ``strata_probs`` gives ``P(Y^(s)(u) = 1 | Z = z)`` for each cell of the
    table's covariate space. Returns a scalar, a p-vector or a p x p matrix
    for ``q`` = 0, 1, 2.
    """
    if q not in (0, 1, 2):
        raise DomainError("q must be 0, 1 or 2")
    probs = np.asarray(strata_probs, dtype=float)
    if probs.shape != (len(table.space),):
        raise DomainError("need one stratum probability per covariate cell")
    if np.any(probs < 0):
        raise DomainError("negative stratum probability")
    counts = table.at_risk_matrix(u)[0]
    return _moments(table.space.cells, probs * counts, gamma)[q]


def zbar(table: CensusTable, strata_probs, gamma, u: float) -> np.ndarray:
    """Census-weighted covariate mean; ``None`` when the risk set is empty."""
    m0 = weighted_moment(table, strata_probs, gamma, u, 0)
    if not m0 > 0:
        return None
    return weighted_moment(table, strata_probs, gamma, u, 1) / m0
