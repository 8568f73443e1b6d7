"""Stratum-membership probabilities.

Two kinds are needed by the estimator:

* ``P(S(a) = s | Z = z)`` for census cells, which weights the census risk set;
* ``P(S_i(a) = s | observed data of subject i)`` for cohort members whose
  history before the window start is unobserved.

The ``first_event`` rule has closed forms. For ``event_count`` rules the
capped event count is a pure-birth Markov chain in age, so both
probabilities are computed exactly from its forward equation.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import expm

from .errors import DegenerateProbabilityError, DomainError, UnsupportedRuleError
from .model import AgeGrid, Cohort, StepFunctionSet, StratificationRule, SubjectRecord


class CumulativeIntensityCache:
    """Tabulated ``M_s(a; z) = int_0^a lambda_0s(u) exp(beta_s(u)'z) du``.

    Built once per set of parameters and shared read-only afterwards. A
    leading replicate axis ``R`` lets one cache serve a batch of parameter
    sets; a single :class:`StepFunctionSet` gives ``R = 1``.

    Attributes
    ----------
    rates : array (R, S, Z, G)
        Intensity of each stratum and covariate cell on each grid cell.
    edges : array (R, S, Z, G + 1)
        ``M_s`` at the cell edges.
    """

    def __init__(self, params: StepFunctionSet, cells):
        self._build(params.grid, params.beta[None], params.baseline[None], cells)

    @classmethod
    def from_arrays(cls, grid: AgeGrid, beta, baseline, cells) -> "CumulativeIntensityCache":
        """Batch cache from ``beta`` (R, S, G, p) and ``baseline`` (R, S, G)."""
        self = cls.__new__(cls)
        self._build(grid, np.asarray(beta, dtype=float), np.asarray(baseline, dtype=float), cells)
        return self

    def _build(self, grid, beta, baseline, cells):
        cells = np.atleast_2d(np.asarray(cells, dtype=float))
        self.grid: AgeGrid = grid
        self.cells = cells
        eta = np.einsum("rsgp,zp->rszg", beta, cells)
        self.rates = baseline[:, :, None, :] * np.exp(eta)
        R, S, Z, G = self.rates.shape
        self.edges = np.zeros((R, S, Z, G + 1))
        np.cumsum(self.rates, axis=3, out=self.edges[..., 1:])
        self.n_strata = S
        self.n_replicates = R

    def replicate(self, r: int) -> "CumulativeIntensityCache":
        out = CumulativeIntensityCache.__new__(CumulativeIntensityCache)
        out.__dict__.update(self.__dict__)
        out.rates = self.rates[r:r + 1]
        out.edges = self.edges[r:r + 1]
        out.n_replicates = 1
        return out

    def _locate(self, a):
        a = np.clip(np.asarray(a, dtype=float), 0.0, self.grid.a_star)
        k = np.minimum(np.floor(a).astype(int), self.grid.n_cells - 1)
        return k, a - k

    def integral(self, s_idx, z_idx, a):
        """``M`` for 0-based stratum and cell indices (broadcast); leading axis R."""
        k, frac = self._locate(a)
        return self.edges[:, s_idx, z_idx, k] + frac * self.rates[:, s_idx, z_idx, k]

    def rate(self, s_idx, z_idx, a):
        k, _ = self._locate(a)
        return self.rates[:, s_idx, z_idx, k]


def cumulative_intensity(z, a: float, s: int, params: StepFunctionSet) -> float:
    """Midpoint-rule integral of the stratum-``s`` intensity from 0 to ``a``."""
    if not 0 <= a <= params.grid.a_star:
        raise DomainError(f"age {a} outside [0, A*]")
    cache = CumulativeIntensityCache(params, [z])
    return float(cache.integral(s - 1, 0, a)[0])


# ---------------------------------------------------------------------------
# pure-birth chain on the capped event count

def _generators(rates_zk):
    """Generator matrices for rates of shape (..., C); last state absorbing."""
    C = rates_zk.shape[-1]
    Q = np.zeros(rates_zk.shape[:-1] + (C, C))
    for k in range(C - 1):
        Q[..., k, k] = -rates_zk[..., k]
        Q[..., k + 1, k] = rates_zk[..., k]
    return Q


def _count_distribution(cache: CumulativeIntensityCache, z_idx, a) -> np.ndarray:
    """P(min(N(a), C-1) = k | z) for each query, shape (R, n, C)."""
    C = cache.n_strata
    z_idx = np.atleast_1d(z_idx)
    a = np.atleast_1d(np.asarray(a, dtype=float))
    z_idx, a = np.broadcast_arrays(z_idx, a)
    G = cache.grid.n_cells
    k, frac = cache._locate(a)
    out = np.empty((cache.n_replicates, z_idx.size, C))
    for r in range(cache.n_replicates):
        # distribution at every edge for every cell: (Z, G + 1, C)
        rates = np.moveaxis(cache.rates[r], 0, -1)  # (Z, G, C)
        step = expm(_generators(rates).reshape(-1, C, C)).reshape(rates.shape[:2] + (C, C))
        dist = np.zeros((rates.shape[0], G + 1, C))
        dist[:, 0, 0] = 1.0
        for g in range(G):
            dist[:, g + 1] = np.einsum("zij,zj->zi", step[:, g], dist[:, g])
        part = expm(_generators(rates[z_idx, k] * frac[:, None]))
        out[r] = np.einsum("nij,nj->ni", part, dist[z_idx, k])
    return out


def census_stratum_probs(cache: CumulativeIntensityCache, rule: StratificationRule,
                         u) -> np.ndarray:
    """``P(S(u) = s | Z = z)`` for every replicate, stratum, age and cell: (R, S, n, Z)."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    nz = cache.cells.shape[0]
    R = cache.n_replicates
    if rule.kind == "trivial":
        return np.ones((R, 1, u.size, nz))
    if rule.kind == "first_event":
        M1 = cache.integral(0, np.arange(nz)[None, :], u[:, None])
        return np.stack([np.exp(-M1), -np.expm1(-M1)], axis=1)
    zz = np.repeat(np.arange(nz)[None, :], u.size, axis=0).ravel()
    uu = np.repeat(u, nz)
    dist = _count_distribution(cache, zz, uu).reshape(R, u.size, nz, -1)
    return np.moveaxis(dist, -1, 1)


def prob_stratum_given_covariate(s: int, a: float, z, params: StepFunctionSet,
                                 rule: StratificationRule | None = None) -> float:
    """``P(S(a) = s | Z = z)`` under the model.

    Only the first-event rule has the closed form ``exp(-M_1)`` /
    ``1 - exp(-M_1)``; pass ``rule`` explicitly to use the forward equation
    of an event-count rule.
    """
    rule = rule or StratificationRule.first_event()
    if rule.kind == "first_event" and s not in (1, 2):
        raise DomainError("first-event rule has strata 1 and 2")
    if rule.kind == "trivial":
        raise UnsupportedRuleError("trivial rule has no stratum probabilities")
    cache = CumulativeIntensityCache(params, [z])
    return float(census_stratum_probs(cache, rule, [a])[0, s - 1, 0, 0])


# ---------------------------------------------------------------------------
# conditional probabilities for cohort members

def _first_event_probs(cohort: Cohort, cache: CumulativeIntensityCache,
                       strict: bool = True) -> np.ndarray:
    """Closed-form P(stratum 1 at each observed event | data); shape (R, E).

    A zero denominator raises, or with ``strict=False`` gives NaN for that
    replicate.
    """
    z = cohort.cell
    a1 = cohort.first_event_age
    cl = cohort.c_left
    nu = cache.rate(0, z, a1) * np.exp(-cache.integral(0, z, a1))
    pre = -np.expm1(-cache.integral(0, z, cl))
    alt = cache.rate(1, z, a1) * pre * np.exp(-(cache.integral(1, z, a1) - cache.integral(1, z, cl)))
    dr = nu + alt
    bad = ~(dr > 0)
    if np.any(bad):
        if not strict:
            with np.errstate(invalid="ignore", divide="ignore"):
                p_first = np.where(bad.any(axis=1, keepdims=True), np.nan, nu / dr)
        else:
            i = int(np.flatnonzero(bad.any(axis=0))[0])
            raise DegenerateProbabilityError(
                f"zero denominator for subject {cohort.ids[i]} (first event at {a1[i]:.4g})")
    else:
        p_first = nu / dr
    out = np.zeros((cache.n_replicates, cohort.event_age.size))
    first = cohort.event_rank == 0
    out[:, first] = p_first[:, cohort.event_subject[first]]
    return out


def _count_posterior(cohort: Cohort, cache: CumulativeIntensityCache,
                     strict: bool = True) -> np.ndarray:
    """Posterior over the capped pre-window count for each subject, shape (R, n, C)."""
    C = cache.n_strata
    n = cohort.n_subjects
    R = cache.n_replicates
    prior = _count_distribution(cache, cohort.cell, cohort.c_left)
    loglik = np.zeros((R, n, C))
    z_ev = cohort.cell[cohort.event_subject]
    subj = cohort.event_subject
    # start of the segment ending at each event
    seg_start = np.where(cohort.event_rank == 0, cohort.c_left[subj],
                         np.concatenate([[0.0], cohort.event_age[:-1]]))
    last = np.flatnonzero(np.r_[cohort.event_subject[1:] != cohort.event_subject[:-1], True])
    with np.errstate(divide="ignore"):
        for k in range(C):
            state = np.minimum(k + cohort.event_rank, C - 1)
            seg = cache.integral(state, z_ev, cohort.event_age) - cache.integral(state, z_ev, seg_start)
            term = np.log(cache.rate(state, z_ev, cohort.event_age)) - seg
            tail_state = np.minimum(k + cohort.n_events, C - 1)
            zl = cohort.cell
            tail = (cache.integral(tail_state, zl, cohort.c_right)
                    - cache.integral(tail_state, zl, cohort.event_age[last]))
            for r in range(R):
                loglik[r, :, k] = np.bincount(subj, weights=term[r], minlength=n) - tail[r]
        logpost = np.log(prior) + loglik
    top = logpost.max(axis=2, keepdims=True)
    bad = ~np.isfinite(top[..., 0])
    if np.any(bad):
        if strict:
            i = int(np.flatnonzero(bad.any(axis=0))[0])
            raise DegenerateProbabilityError(f"zero posterior mass for subject {cohort.ids[i]}")
        top = np.where(bad[..., None], 0.0, top)
        logpost = np.where(bad.any(axis=1)[:, None, None], np.nan, logpost)
    w = np.exp(logpost - top)
    return w / w.sum(axis=2, keepdims=True)


def event_stratum_probs(cohort: Cohort, cache: CumulativeIntensityCache,
                        rule: StratificationRule, known: bool = False,
                        strict: bool = True) -> np.ndarray:
    """Stratum probabilities at every observed event, shape (R, S, E).

    With ``known=True`` the strata are computed from the observed history and
    the known pre-window count (indicators); otherwise they are the
    conditional probabilities given the subject's observed data. With
    ``strict=False`` a replicate whose probabilities are undefined is
    returned as NaN instead of raising.
    """
    S = rule.n_strata
    E = cohort.event_age.size
    R = cache.n_replicates
    if rule.kind == "trivial":
        return np.ones((R, 1, E))
    if known:
        if not cohort.strata_known:
            raise DomainError("strata are not observable: some pre-window counts are unknown")
        prior = cohort.prior_counts[cohort.event_subject]
        strat = rule.stratum_from_count(prior + cohort.event_rank)
        ind = (strat[None, :] == np.arange(1, S + 1)[:, None]).astype(float)
        return np.broadcast_to(ind, (R, S, E)).copy()
    if rule.kind == "first_event":
        p1 = _first_event_probs(cohort, cache, strict)
        return np.stack([p1, 1.0 - p1], axis=1)
    post = _count_posterior(cohort, cache, strict)[:, cohort.event_subject]  # (R, E, C)
    out = np.zeros((R, S, E))
    rank = cohort.event_rank
    cols = np.arange(E)
    for k in range(S):
        s_idx = np.minimum(k + rank, S - 1)
        for r in range(R):
            np.add.at(out[r], (s_idx, cols), post[r, :, k])
    # summing posterior mass can overshoot 1 by a few ulps
    return np.clip(out, 0.0, 1.0)


def prob_stratum_given_data(subject: SubjectRecord, a: float, params: StepFunctionSet,
                            rule: StratificationRule | None = None) -> float:
    """``P(S_i(a) = 1 | observed data)`` for a cohort member (stratum 2 is the complement).

    Zero once an observed event precedes ``a``; otherwise constant over
    ``(c_left, a_i1]``.
    """
    rule = rule or StratificationRule.first_event()
    if rule.kind != "first_event":
        raise UnsupportedRuleError("closed form exists only for the first-event rule")
    if not subject.c_left < a <= subject.c_right:
        raise DomainError(f"age {a} outside the window ({subject.c_left}, {subject.c_right}]")
    if not subject.event_ages:
        raise DomainError("subject has no observed event")
    if subject.event_ages[0] < a:
        return 0.0
    z = np.asarray(subject.covariates, dtype=float)
    cache = CumulativeIntensityCache(params, [z])
    a1, cl = subject.event_ages[0], subject.c_left
    nu = cache.rate(0, 0, a1)[0] * np.exp(-cache.integral(0, 0, a1)[0])
    alt = (cache.rate(1, 0, a1)[0] * -np.expm1(-cache.integral(0, 0, cl)[0])
           * np.exp(-(cache.integral(1, 0, a1)[0] - cache.integral(1, 0, cl)[0])))
    dr = nu + alt
    if not dr > 0:
        raise DegenerateProbabilityError(
            f"zero denominator for subject {subject.id} at first event {a1}")
    return float(nu / dr)
