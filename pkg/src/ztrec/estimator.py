"""Kernel-weighted estimating equations and the alternating fitting algorithm.

For each stratum ``s`` and target age ``a`` the coefficient ``gamma_s``
solves

    sum_i sum_{events u of i} K_h(u - a) p_is(u) w_i {Z_i - zbar_s(gamma_s; u)} = 0,

where ``p_is(u)`` is the stratum indicator (known strata) or its conditional
probability given the observed data, ``w_i`` a subject weight (1 for the
point estimate, multipliers for resampling) and ``zbar_s`` the census
approximation of the risk-set covariate mean. Given the coefficients, the
cumulative baselines are Breslow-type sums. The two steps alternate until
the coefficients stop changing.

Every array carries a leading replicate axis so that a batch of weight
vectors (resampling replicates) is fitted in one pass; an ordinary fit is a
batch of one.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .census import CensusTable
from .errors import (ConvergenceError, DegenerateProbabilityError, DivergenceError,
                     DomainError, FitError, InsufficientDataError, RankDeficiencyError)
from .kernel import KernelConfig, kernel_mass, kernel_weight
from .model import Cohort, ModelSpec, StepFunctionSet
from .strata import CumulativeIntensityCache, census_stratum_probs, event_stratum_probs

log = logging.getLogger(__name__)

OK, INSUFFICIENT, RANK_DEFICIENT, NOT_CONVERGED, UNIDENTIFIED = 0, 1, 2, 3, 4
STATUS_NAMES = {OK: "ok", INSUFFICIENT: "insufficient", RANK_DEFICIENT: "rank_deficient",
                NOT_CONVERGED: "not_converged", UNIDENTIFIED: "unidentified"}

SCORE_TOL = 1e-8
MAX_NEWTON_STEPS = 50
MAX_HALVINGS = 40
GAMMA_LIMIT = 50.0
# smallest eigenvalue of the information per unit of kernel-weighted event mass
# below which a root is treated as unidentified (the score only vanishes as
# gamma runs off to infinity, as under complete separation)
FLAT_INFORMATION = 1e-6
# largest extrapolation (coefficient units, or baseline relative to its scale)
# accepted from Anderson mixing regardless of the plain step size
ANDERSON_MAX_JUMP = 2.0


@dataclass
class NewtonResult:
    gamma: np.ndarray      # (R, G, p)
    status: np.ndarray     # (R, G)
    steps: np.ndarray      # (R, G)
    score: np.ndarray      # (R, G, p)


@dataclass
class Terms:
    """Aggregated kernel pairs of one coefficient group.

    Events are grouped into segments (grid cell x census age bin). A term
    is a (segment, stratum) combination carrying one census row; a pair
    links a term to a target age and holds the kernel-weighted sums
    ``A = sum K p w`` and ``B = sum K p w Z`` over the segment's events.
    Arrays are pair-major with the replicate axis second.
    """

    pair_term: np.ndarray   # (P,)
    pair_point: np.ndarray  # (P,)
    A: np.ndarray           # (P, R)
    B: np.ndarray           # (P, R, p)
    census: np.ndarray      # (T, R, Z) stratum prob * at-risk count
    n_points: int
    n_degenerate: np.ndarray  # (R,)

    def __post_init__(self):
        P = self.pair_term.size
        self.collect = sparse.csr_matrix(
            (np.ones(P), (self.pair_point, np.arange(P))), shape=(self.n_points, P))

    def rows(self, r) -> "Terms":
        """Restriction to replicates ``r``."""
        out = Terms.__new__(Terms)
        out.__dict__.update(self.__dict__)
        out.A, out.B, out.census = self.A[:, r], self.B[:, r], self.census[:, r]
        out.n_degenerate = self.n_degenerate[r]
        return out


def _as_weight_matrix(weights, n: int) -> np.ndarray:
    # negative weights are allowed: normal multipliers enter as 1 + G
    w = np.ones((1, n)) if weights is None else np.asarray(weights, dtype=float)
    if w.ndim == 1:
        w = w[None, :]
    if w.ndim != 2 or w.shape[1] != n:
        raise DomainError(f"weights must have one entry per subject ({n})")
    if not np.all(np.isfinite(w)):
        raise DomainError("weights must be finite")
    return w


class EstimatingEquations:
    """Precomputed data for one (cohort, census, model) combination.

    Census stratum probabilities are evaluated at the midpoint of the grid
    cell holding each event; at-risk counts use the census age bin of the
    event age itself.

    Parameters
    ----------
    cohort : Cohort
    census : CensusTable
    spec : ModelSpec
    weights : array (n,) or (R, n), optional
        Per-subject multipliers, one row per replicate; defaults to ones.
    known_strata : bool
        Use observed stratum indicators instead of conditional probabilities.
    """

    def __init__(self, cohort: Cohort, census: CensusTable, spec: ModelSpec,
                 weights=None, known_strata: bool = False):
        if len(census.space) != len(cohort.space) \
                or not np.array_equal(census.space.cells, cohort.space.cells):
            raise DomainError("census and cohort covariate spaces differ")
        if census.grid != spec.grid or cohort.grid != spec.grid:
            raise DomainError("cohort, census and model use different age grids")
        self.cohort = cohort
        self.census = census
        self.spec = spec
        self.rule = spec.effective_rule
        self.S = self.rule.n_strata
        self.grid = spec.grid
        self.cells = np.asarray(cohort.space.cells)
        self.p = self.cells.shape[1]
        self._cc = np.einsum("zp,zq->zpq", self.cells, self.cells).reshape(len(self.cells), -1)
        self.known_strata = known_strata
        self.kernel = KernelConfig(spec.kernel, spec.bandwidth_units)
        self.u = cohort.event_age
        self.event_Z = cohort.Z[cohort.event_subject]
        self.event_cell = self.grid.cell_index(self.u)
        self._order = np.argsort(self.u, kind="stable")
        self._edge_pos = np.searchsorted(self.u[self._order], self.grid.edges, side="right")
        # segments: grid cell x census age bin
        bins = census.age_bin(self.u)
        key = self.event_cell * census.n_bins + bins
        seg_key, self.event_seg = np.unique(key, return_inverse=True)
        self.seg_cell = seg_key // census.n_bins
        self.seg_at_risk = census.pooled[:, seg_key % census.n_bins].T   # (Ns, Z)
        if spec.coef_time_varying:
            self.points = spec.solve_points()
        else:
            self.points = np.array([0.5 * (spec.tau_left_units + spec.tau_right_units)])
        self.point_cells = self.grid.cell_index(self.points)
        self._set_pairs()
        cfg = KernelConfig("epanechnikov", spec.bandwidth_units)
        mids = self.grid.midpoints
        # (E, G) banded smoothing weights
        sm = kernel_weight(self.u[:, None] - mids[None, :], cfg) / \
            kernel_mass(0.0, self.grid.a_star, mids, cfg)[None, :]
        self._smoother = sparse.csr_matrix(sm)
        self.set_weights(weights)

    def set_weights(self, weights=None):
        self.weights = _as_weight_matrix(weights, self.cohort.n_subjects)
        self.event_w = self.weights[:, self.cohort.event_subject]

    @property
    def n_replicates(self) -> int:
        return self.weights.shape[0]

    def _set_pairs(self):
        u = self.u
        if not self.spec.coef_time_varying:
            inside = (u >= self.spec.tau_left_units) & (u <= self.spec.tau_right_units)
            e = np.flatnonzero(inside)
            g = np.zeros(e.size, dtype=int)
            k = np.ones(e.size)
        else:
            h = self.kernel.bandwidth
            us = u[self._order]
            lo = np.searchsorted(us, self.points - h, side="left")
            hi = np.searchsorted(us, self.points + h, side="right")
            ev = [self._order[lo[j]:hi[j]] for j in range(self.points.size)]
            e = np.concatenate(ev) if ev else np.zeros(0, dtype=int)
            g = np.repeat(np.arange(self.points.size), [x.size for x in ev])
            k = np.asarray(kernel_weight(u[e] - self.points[g], self.kernel))
            keep = k > 0
            e, g, k = e[keep], g[keep], k[keep]
        agg_key = self.event_seg[e] * self.points.size + g
        keys, pair_agg = np.unique(agg_key, return_inverse=True)
        self.agg_seg = keys // self.points.size
        self.agg_point = keys % self.points.size
        # (n_agg, E): kernel weight of each event in each aggregated pair
        self._kmat = sparse.csr_matrix((k, (pair_agg, e)), shape=(keys.size, u.size))

    @property
    def coef_groups(self) -> list[list[int]]:
        if self.spec.coef_stratified:
            return [[s] for s in range(self.S)]
        return [list(range(self.S))]

    @property
    def baseline_groups(self) -> list[list[int]]:
        if self.spec.baseline_stratified:
            return [[s] for s in range(self.S)]
        return [list(range(self.S))]

    # -- probabilities -------------------------------------------------------

    def probabilities(self, beta, baseline):
        """Subject probabilities (R, S, E) and census stratum probabilities per segment (R, S, Ns, Z).

        ``beta`` is (R, S, G, p) and ``baseline`` (R, S, G).
        """
        cache = CumulativeIntensityCache.from_arrays(self.grid, beta, baseline, self.cells)
        p_subj = event_stratum_probs(self.cohort, cache, self.rule, known=self.known_strata,
                                     strict=False)
        p_cell = census_stratum_probs(cache, self.rule, self.grid.midpoints)  # (R, S, G, Z)
        return p_subj, p_cell[:, :, self.seg_cell]

    def terms(self, group, p_subj, p_census, event_w=None) -> Terms:
        event_w = self.event_w if event_w is None else event_w
        R = event_w.shape[0]
        n_seg = self.seg_cell.size
        kmat = self._kmat
        terms, points, A, B, rows = [], [], [], [], []
        n_deg = np.zeros(R, dtype=int)
        for j, s in enumerate(group):
            cw = p_census[:, s] * self.seg_at_risk                 # (R, Ns, Z)
            degenerate = ~(cw.sum(axis=2) > 0)
            a0 = p_subj[:, s] * event_w                             # (R, E)
            bad = degenerate[:, self.event_seg] & (a0 > 0)
            n_deg += bad.sum(axis=1)
            a0 = np.where(bad, 0.0, a0).T                           # (E, R)
            a_s = np.asarray(kmat @ a0)                             # (n_agg, R)
            b_s = np.asarray(kmat @ (a0[:, :, None] * self.event_Z[:, None, :]).reshape(
                a0.shape[0], -1)).reshape(a_s.shape + (self.p,))
            keep = np.any(a_s > 0, axis=1)
            terms.append(self.agg_seg[keep] + j * n_seg)
            points.append(self.agg_point[keep])
            A.append(a_s[keep])
            B.append(b_s[keep])
            rows.append(cw.transpose(1, 0, 2))
        return Terms(np.concatenate(terms), np.concatenate(points), np.concatenate(A),
                     np.concatenate(B), np.concatenate(rows), self.points.size, n_deg)

    # -- score ---------------------------------------------------------------

    def _pi(self, terms: Terms, gamma):
        """Census cell shares per pair (P, R, Z) at ``gamma`` (G, R, p)."""
        eta = gamma @ self.cells.T
        eta -= eta.max(axis=2, keepdims=True)
        num = terms.census[terms.pair_term] * np.exp(eta)[terms.pair_point]
        den = num.sum(axis=2)
        return num / np.where(den > 0, den, 1.0)[..., None]

    def pair_parts(self, terms: Terms, gamma):
        """Per-pair census zbar (P, R, p) and second moment (P, R, p*p) at ``gamma`` (G, R, p)."""
        pi = self._pi(terms, gamma)
        return pi @ self.cells, pi @ self._cc

    def _collect(self, terms: Terms, x):
        """Sum per-pair values (P, R, k) into target ages (G, R, k)."""
        P, R, k = x.shape
        return np.asarray(terms.collect @ x.reshape(P, R * k)).reshape(terms.n_points, R, k)

    def score(self, terms: Terms, gamma):
        """Score (G, R, p) at ``gamma`` (G, R, p)."""
        zb = self._pi(terms, gamma) @ self.cells
        return self._collect(terms, terms.B - terms.A[..., None] * zb)

    def score_jacobian(self, terms: Terms, gamma):
        """Score (G, R, p) and analytic Jacobian (G, R, p, p) at ``gamma`` (G, R, p)."""
        p = self.p
        zb, second = self.pair_parts(terms, gamma)
        A = terms.A[..., None]
        U = self._collect(terms, terms.B - A * zb)
        cov = second - (zb[..., :, None] * zb[..., None, :]).reshape(zb.shape[:2] + (p * p,))
        J = -self._collect(terms, A * cov)
        return U, J.reshape(J.shape[:2] + (p, p))

    def total_weight(self, terms: Terms) -> np.ndarray:
        """Kernel-weighted event mass per target age and replicate (G, R)."""
        return self._collect(terms, terms.A[..., None])[..., 0]

    def newton(self, terms: Terms, gamma0) -> NewtonResult:
        """Newton iteration with step halving, run for all replicates and target ages at once.

        ``gamma0`` is (R, G, p); results use the same layout.
        """
        R, G, p = terms.A.shape[1], terms.n_points, self.p
        gamma = np.array(np.asarray(gamma0, dtype=float).reshape(R, G, p).transpose(1, 0, 2))
        status = np.full((G, R), OK)
        steps = np.zeros((G, R), dtype=int)
        mass = self.total_weight(terms)
        status[~(mass > 0)] = INSUFFICIENT
        U, J = self.score_jacobian(terms, gamma)
        fresh = np.ones((G, R), dtype=bool)   # J evaluated at the current gamma
        slow = np.zeros((G, R), dtype=bool)   # last step reduced the score too little
        norm = np.abs(U).max(axis=2)
        # a score that is zero everywhere (one covariate cell) is already "solved"
        gi, ri = np.nonzero((status == OK) & (norm <= SCORE_TOL))
        if gi.size:
            eig = np.linalg.eigvalsh(-J[gi, ri])
            singular = eig[:, 0] <= 1e-12 * np.maximum(eig[:, -1], 1e-300)
            status[gi[singular], ri[singular]] = RANK_DEFICIENT
        for _ in range(MAX_NEWTON_STEPS):
            active = (status == OK) & (norm > SCORE_TOL)
            if not active.any():
                break
            # chord steps reuse J while they keep cutting the score norm
            stale = active & ~fresh & slow
            if stale.any():
                cols = np.flatnonzero(stale.any(axis=0))
                _, Jc = self.score_jacobian(terms.rows(cols), gamma[:, cols])
                gi, li = np.nonzero(stale[:, cols])
                J[gi, cols[li]] = Jc[gi, li]
                fresh |= stale
            gi, ri = np.nonzero(active & fresh)
            if gi.size:
                eig = np.linalg.eigvalsh(-J[gi, ri])
                singular = eig[:, 0] <= 1e-12 * np.maximum(eig[:, -1], 1e-300)
                status[gi[singular], ri[singular]] = RANK_DEFICIENT
            gi, ri = np.nonzero(active & (status == OK))
            if ri.size == 0:
                break
            delta = np.linalg.solve(J[gi, ri], U[gi, ri][..., None])[..., 0]
            t = np.ones(ri.size)
            pending = np.ones(ri.size, dtype=bool)
            for _ in range(MAX_HALVINGS):
                cols = np.unique(ri[pending])
                cand = gamma[:, cols]
                local = np.searchsorted(cols, ri[pending])
                cand[gi[pending], local] -= t[pending, None] * delta[pending]
                Uc = self.score(terms.rows(cols), cand)
                nc = np.abs(Uc).max(axis=2)
                better = pending.copy()
                better[pending] = nc[gi[pending], local] < norm[gi[pending], ri[pending]]
                b_g, b_r = gi[better], ri[better]
                b_l = np.searchsorted(cols, b_r)
                slow[b_g, b_r] = (nc[b_g, b_l] > 0.25 * norm[b_g, b_r]) | (t[better] < 1)
                gamma[b_g, b_r] = cand[b_g, b_l]
                U[b_g, b_r], norm[b_g, b_r] = Uc[b_g, b_l], nc[b_g, b_l]
                fresh[b_g, b_r] = False
                steps[b_g, b_r] += 1
                pending &= ~better
                if not pending.any():
                    break
                t[pending] *= 0.5
            # a failed chord step gets a fresh Jacobian before giving up
            retry = pending & ~fresh[gi, ri]
            slow[gi[retry], ri[retry]] = True
            done = pending & ~retry
            status[gi[done], ri[done]] = NOT_CONVERGED
            status[np.abs(gamma).max(axis=2) > GAMMA_LIMIT] = NOT_CONVERGED
        status[(status == OK) & (norm > SCORE_TOL)] = NOT_CONVERGED
        gi, ri = np.nonzero(status == OK)
        if gi.size:
            info = np.linalg.eigvalsh(-J[gi, ri])[:, 0]
            flat = info <= FLAT_INFORMATION * mass[gi, ri]
            status[gi[flat], ri[flat]] = UNIDENTIFIED
        return NewtonResult(gamma.transpose(1, 0, 2), status.T, steps.T, U.transpose(1, 0, 2))

    # -- baselines -----------------------------------------------------------

    def breslow(self, beta, p_subj, p_census, event_w=None):
        """Cumulative baselines at the grid edges (R, S, G + 1) and event increments (R, S, E).

        ``beta`` is the full-grid coefficient array (R, S, G, p); 0/0 = 0.
        """
        event_w = self.event_w if event_w is None else event_w
        R, S, G = beta.shape[0], self.S, self.grid.n_cells
        eta = np.einsum("rsnp,zp->rsnz", beta[:, :, self.seg_cell], self.cells)
        denom = (p_census * np.exp(eta) * self.seg_at_risk).sum(axis=3)[..., self.event_seg]
        cum = np.zeros((R, S, G + 1))
        incr_all = np.zeros((R, S, self.u.size))
        skipped = np.zeros(R, dtype=int)
        for grp in self.baseline_groups:
            num = (p_subj[:, grp] * event_w[:, None]).sum(axis=1)
            den = denom[:, grp].sum(axis=1)
            ok = den > 0
            skipped += np.count_nonzero(~ok & (num > 0), axis=1)
            incr = np.where(ok, num / np.where(ok, den, 1.0), 0.0)
            run = np.zeros((R, self.u.size + 1))
            np.cumsum(incr[:, self._order], axis=1, out=run[:, 1:])
            for s in grp:
                cum[:, s] = run[:, self._edge_pos]
                incr_all[:, s] = incr
        return cum, incr_all, skipped

    def smooth_baseline(self, incr) -> np.ndarray:
        """Baseline intensity on the grid from Breslow increments (R, S, E) -> (R, S, G).

        Epanechnikov-smoothed increments, renormalized by the kernel mass
        inside ``[0, A*]`` to remove the boundary deficit. Negative values,
        possible only under negative weights, are set to zero.
        """
        R, S, E = incr.shape
        out = np.asarray((self._smoother.T @ incr.reshape(R * S, E).T).T).reshape(R, S, -1)
        return np.maximum(out, 0.0)


@dataclass
class FitResult:
    """Outcome of :func:`fit`.

    ``params`` holds the full-grid coefficients (constant-extended outside
    the solve range), the smoothed baselines and the Breslow cumulative
    baselines. ``status`` has one code per stratum and solve point.
    """

    spec: ModelSpec
    params: StepFunctionSet
    solve_points: np.ndarray
    status: np.ndarray
    iterations: int
    converged: bool
    insufficient_strata: list[int]
    change_history: list[float] = field(default_factory=list)
    newton_steps: int = 0
    degenerate_events: int = 0
    skipped_increments: int = 0
    interpolated_points: int = 0

    @property
    def coefficients(self) -> np.ndarray:
        """Coefficients (S, G, p); NaN for strata without usable data."""
        beta = np.array(self.params.beta)
        for s in self.insufficient_strata:
            beta[s - 1] = np.nan
        return beta

    @property
    def cumulative_baselines(self) -> np.ndarray:
        return self.params.cumulative

    @property
    def baselines(self) -> np.ndarray:
        return self.params.baseline

    def diagnostics(self) -> dict:
        codes = {name: int(np.count_nonzero(self.status == c)) for c, name in STATUS_NAMES.items()}
        return {"model": self.spec.name, "iterations": self.iterations,
                "converged": self.converged, "status_counts": codes,
                "insufficient_strata": list(self.insufficient_strata),
                "excluded_points": [
                    {"stratum": int(s + 1), "age_units": float(self.solve_points[g]),
                     "reason": STATUS_NAMES[int(self.status[s, g])]}
                    for s, g in zip(*np.nonzero(self.status != OK))],
                "interpolated_points": self.interpolated_points,
                "newton_steps": self.newton_steps,
                "degenerate_events": self.degenerate_events,
                "skipped_increments": self.skipped_increments,
                "relative_change": list(self.change_history)}


@dataclass
class BatchFit:
    """Per-replicate outcome of a batched fit; the leading axis is the replicate.

    ``failure`` is ``None`` for a usable replicate, otherwise a short reason
    (``"diverged"``, ``"not_converged"``, ``"failed: ..."``).
    """

    beta: np.ndarray          # (R, S, G, p)
    baseline: np.ndarray      # (R, S, G)
    cumulative: np.ndarray    # (R, S, G + 1)
    status: np.ndarray        # (R, S, Gs)
    iterations: np.ndarray    # (R,)
    converged: np.ndarray     # (R,)
    insufficient: np.ndarray  # (R, S)
    failure: list
    history: list
    newton_steps: np.ndarray
    degenerate_events: np.ndarray
    skipped_increments: np.ndarray
    interpolated_points: np.ndarray

    @property
    def ok(self) -> np.ndarray:
        return np.array([f is None for f in self.failure])


def _extend(points_beta, points, status, grid):
    """Fill the full grid from solved points: interpolate failures, extend constants.

    Returns ``(beta (G, p), n_interpolated)``, or ``(None, 0)`` when no point
    was solved.
    """
    good = status == OK
    if not good.any():
        return None, 0
    mids = grid.midpoints
    out = np.empty((grid.n_cells, points_beta.shape[1]))
    for j in range(points_beta.shape[1]):
        out[:, j] = np.interp(mids, points[good], points_beta[good, j])
    return out, int(np.count_nonzero(~good & (status != INSUFFICIENT)))


def _relative_change(new, old, active=None):
    """Largest relative l1 change over strata and points, per replicate.

    ``new`` and ``old`` are (R, S, Gs, p); ``active`` (R, S) masks strata.
    Absolute change is used where the previous value is (near) zero.
    """
    diff = np.abs(new - old).sum(axis=-1)
    base = np.abs(old).sum(axis=-1)
    small = base < 1e-10
    rel = np.where(small, diff, diff / np.where(small, 1.0, base))
    if active is not None:
        rel = np.where(active[:, :, None], rel, 0.0)
    return rel.reshape(rel.shape[0], -1).max(axis=1, initial=0.0)


def initial_params(eq: EstimatingEquations) -> StepFunctionSet:
    """Zero coefficients and a flat baseline: weighted events over census person-units."""
    rate = float(eq.event_w[0].sum()) / max(eq.census.total_person_units(), 1e-300)
    return StepFunctionSet.constant(eq.grid, eq.S, eq.p, rate)


def _stack_init(eq: EstimatingEquations, init):
    """Initial (beta, baseline) arrays with a replicate axis."""
    R = eq.n_replicates
    if init is None:
        beta = np.zeros((R, eq.S, eq.grid.n_cells, eq.p))
        rate = eq.event_w.sum(axis=1) / max(eq.census.total_person_units(), 1e-300)
        baseline = np.broadcast_to(rate[:, None, None], (R, eq.S, eq.grid.n_cells)).copy()
        return beta, baseline
    if isinstance(init, StepFunctionSet):
        if init.n_strata != eq.S or init.dim != eq.p:
            raise DomainError("initial parameters do not match the model")
        return (np.broadcast_to(init.beta, (R,) + init.beta.shape).copy(),
                np.broadcast_to(init.baseline, (R,) + init.baseline.shape).copy())
    beta, baseline = (np.asarray(x, dtype=float) for x in init)
    if beta.shape != (R, eq.S, eq.grid.n_cells, eq.p) or baseline.shape != beta.shape[:3]:
        raise DomainError("initial parameters do not match the model")
    return beta.copy(), baseline.copy()


def _solve_coefficients(eq, terms_by_group, warm, excluded=None):
    """Coefficient step for a batch; returns beta, status, insufficient, failure, counts.

    ``excluded`` (R, S, points) marks points already found unidentified;
    they are interpolated whatever the current solve returns.
    """
    R = warm.shape[0]
    G, p = eq.grid.n_cells, eq.p
    beta = np.zeros((R, eq.S, G, p))
    status = np.full((R, eq.S, eq.points.size), INSUFFICIENT)
    insufficient = np.zeros((R, eq.S), dtype=bool)
    failure = [None] * R
    steps = np.zeros(R, dtype=int)
    n_interp = np.zeros(R, dtype=int)
    for grp, terms in terms_by_group:
        res = eq.newton(terms, warm[:, grp[0]][:, eq.point_cells])
        steps += res.steps.sum(axis=1)
        for r in range(R):
            st = res.status[r]
            if excluded is not None:
                st = np.where(excluded[r, grp[0]] & (st != INSUFFICIENT), UNIDENTIFIED, st)
            if np.all(st == INSUFFICIENT):
                insufficient[r, grp] = True
                full = np.zeros((G, p))
            elif not eq.spec.coef_time_varying:
                if st[0] != OK:
                    failure[r] = f"failed: constant coefficient solve {STATUS_NAMES[int(st[0])]}"
                    continue
                full = np.repeat(res.gamma[r], G, axis=0)
            else:
                full, ni = _extend(res.gamma[r], eq.points, st, eq.grid)
                if full is None:
                    failure[r] = "failed: every solve point failed for a coefficient group"
                    continue
                n_interp[r] += ni
            beta[r, grp] = full
            status[r, grp] = st
    for r in range(R):
        if failure[r] is None and insufficient[r].all():
            failure[r] = "failed: no grid point has kernel-weighted events in any stratum"
    return beta, status, insufficient, failure, steps, n_interp


class _Anderson:
    """Per-replicate Anderson mixing of the fixed-point map (beta, baseline) -> update.

    The baseline enters relative to its scale at the first update. The
    relative change may rise for a step or two, as usual with this kind of
    mixing; once it exceeds twice the best value since the last restart the
    history is dropped and the plain update is used.
    """

    def __init__(self, memory: int = 5):
        self.memory = memory
        self.hist: dict[int, list] = {}
        self.scale: dict[int, float] = {}
        self.best: dict[int, float] = {}

    def _pack(self, r, beta, lam):
        return np.concatenate([beta.ravel(), lam.ravel() / self.scale[r]])

    def step(self, r, beta, lam, new_beta, new_lam, change: float):
        if r not in self.scale:
            self.scale[r] = max(float(np.mean(new_lam)), 1e-300)
        if change > 2.0 * self.best.get(r, np.inf):
            self.hist[r] = []
            self.best[r] = change
        else:
            self.best[r] = min(change, self.best.get(r, np.inf))
        x, fx = self._pack(r, beta, lam), self._pack(r, new_beta, new_lam)
        h = self.hist.setdefault(r, [])
        h.append((x, fx - x))
        del h[:-(self.memory + 1)]
        if len(h) < 2:
            return new_beta, new_lam
        X = np.array([e[0] for e in h])
        Gm = np.array([e[1] for e in h])
        dX, dG = np.diff(X, axis=0), np.diff(Gm, axis=0)
        coef = np.linalg.lstsq(dG.T, Gm[-1], rcond=None)[0]
        nxt = fx - (dX + dG).T @ coef
        # safeguard: a jump both far beyond the plain step and large in absolute
        # terms is not trusted (slow modes legitimately need ~1/(1 - rate) steps)
        plain = np.abs(fx - x).max()
        jump = np.abs(nxt - fx).max()
        if not np.isfinite(jump) or jump > max(10.0 * plain, ANDERSON_MAX_JUMP):
            self.hist[r] = []
            self.best[r] = np.inf
            return new_beta, new_lam
        nb = nxt[:beta.size].reshape(beta.shape)
        nl = np.maximum(nxt[beta.size:] * self.scale[r], 0.0).reshape(lam.shape)
        return nb, nl


def _run(eq: EstimatingEquations, init=None, max_iterations=None, tolerance=None,
         divergence_window: int = 5, accelerate: bool = False) -> BatchFit:
    """Alternate coefficient and baseline steps for every replicate of ``eq``.

    Replicates stop individually: on convergence, on ``divergence_window``
    consecutive increases of the relative change, or on a failed solve.
    With ``accelerate`` the next input is an Anderson extrapolation of the
    recent updates instead of the last update itself; the fixed point and
    the stopping rule (relative change between input and update) are
    unchanged.
    """
    spec = eq.spec
    R, S = eq.n_replicates, eq.S
    tol = spec.tolerance if tolerance is None else tolerance
    max_it = spec.max_iterations if max_iterations is None else max_iterations
    beta, baseline = _stack_init(eq, init)
    cumulative = np.concatenate([np.zeros((R, S, 1)), np.cumsum(baseline, axis=2)], axis=2)
    status = np.full((R, S, eq.points.size), INSUFFICIENT)
    iterations = np.zeros(R, dtype=int)
    converged = np.zeros(R, dtype=bool)
    insufficient = np.zeros((R, S), dtype=bool)
    failure: list = [None] * R
    history = [[] for _ in range(R)]
    rises = np.zeros(R, dtype=int)
    steps = np.zeros(R, dtype=int)
    n_deg = np.zeros(R, dtype=int)
    skipped = np.zeros(R, dtype=int)
    n_interp = np.zeros(R, dtype=int)
    idx = eq.point_cells
    active = np.arange(R)
    # iteration inputs; differ from the stored updates only when accelerating
    x_beta, x_base = beta.copy(), baseline.copy()
    mixer = _Anderson() if accelerate else None
    # once a point loses identification it stays interpolated; otherwise the
    # reset feeds back through the stratum probabilities and the drift repeats
    excluded = np.zeros(status.shape, dtype=bool)
    for it in range(1, max_it + 1):
        if active.size == 0:
            break
        a = active
        with np.errstate(over="ignore", invalid="ignore"):
            p_subj, p_census = eq.probabilities(x_beta[a], x_base[a])
        defined = np.isfinite(p_subj).all(axis=(1, 2)) & np.isfinite(p_census).all(axis=(1, 2, 3))
        if not defined.all():
            for r in a[~defined]:
                iterations[r] = it
                failure[r] = "failed: degenerate stratum probabilities"
            a, p_subj, p_census = a[defined], p_subj[defined], p_census[defined]
            if a.size == 0:
                break
        ew = eq.event_w[a]
        groups = [(grp, eq.terms(grp, p_subj, p_census, ew)) for grp in eq.coef_groups]
        new_beta, st, insuf, fail, nsteps, ni = _solve_coefficients(eq, groups, x_beta[a],
                                                                   excluded[a])
        cum, incr, sk = eq.breslow(new_beta, p_subj, p_census, ew)
        lam = eq.smooth_baseline(incr)
        change = _relative_change(new_beta[:, :, idx], x_beta[a][:, :, idx], ~insuf)
        keep = np.ones(a.size, dtype=bool)
        for j, r in enumerate(a):
            iterations[r] = it
            steps[r] += nsteps[j]
            if fail[j] is not None:
                failure[r] = fail[j]
                keep[j] = False
                continue
            beta[r], baseline[r], cumulative[r] = new_beta[j], lam[j], cum[j]
            status[r], insufficient[r] = st[j], insuf[j]
            excluded[r] |= st[j] == UNIDENTIFIED
            n_deg[r] = sum(int(t.n_degenerate[j]) for _, t in groups)
            skipped[r], n_interp[r] = sk[j], ni[j]
            history[r].append(float(change[j]))
            if S == 1 or change[j] <= tol:
                converged[r] = True
                keep[j] = False
                continue
            h = history[r]
            worse = len(h) > 1 and h[-1] > h[-2]
            rises[r] = rises[r] + 1 if worse else 0
            if rises[r] >= divergence_window:
                failure[r] = "diverged"
                keep[j] = False
            elif mixer is not None:
                x_beta[r], x_base[r] = mixer.step(r, x_beta[r], x_base[r], new_beta[j], lam[j],
                                                  h[-1])
            else:
                x_beta[r], x_base[r] = new_beta[j], lam[j]
        active = a[keep]
    for r in range(R):
        if failure[r] is None and not converged[r]:
            failure[r] = "not_converged"
    return BatchFit(beta, baseline, cumulative, status, iterations, converged, insufficient,
                    failure, history, steps, n_deg, skipped, n_interp)


def _single(eq: EstimatingEquations, batch: BatchFit) -> FitResult:
    fail = batch.failure[0]
    hist = batch.history[0]
    if fail == "diverged":
        raise DivergenceError(f"relative change kept growing (last {hist[-1]:.3g})")
    if fail is not None and fail.startswith("failed"):
        reason = fail.split(": ", 1)[1]
        if "degenerate" in reason:
            raise DegenerateProbabilityError(f"{reason}: zero conditional-probability "
                                             "denominator for some subject")
        raise FitError(reason)
    if fail == "not_converged":
        log.warning("fit did not converge in %d iterations (last change %.3g)",
                    batch.iterations[0], hist[-1])
    if batch.degenerate_events[0]:
        log.warning("%d event(s) at ages with an empty census risk set were excluded",
                    batch.degenerate_events[0])
    if batch.skipped_increments[0]:
        log.warning("%d Breslow increment(s) skipped: empty census risk set",
                    batch.skipped_increments[0])
    params = StepFunctionSet(eq.grid, batch.beta[0], batch.baseline[0], batch.cumulative[0])
    insufficient = [int(s) + 1 for s in np.flatnonzero(batch.insufficient[0])]
    return FitResult(eq.spec, params, eq.points, batch.status[0], int(batch.iterations[0]),
                     bool(batch.converged[0]), insufficient, hist, int(batch.newton_steps[0]),
                     int(batch.degenerate_events[0]), int(batch.skipped_increments[0]),
                     int(batch.interpolated_points[0]))


def fit(cohort: Cohort, census: CensusTable, spec: ModelSpec, weights=None,
        known_strata: bool = False, init: StepFunctionSet | None = None,
        max_iterations: int | None = None) -> FitResult:
    """Fit any of the eight submodels by alternating coefficient and baseline steps.

    Parameters
    ----------
    cohort, census, spec
        Data and model selection.
    weights : array (n,), optional
        Per-subject multipliers for the estimating equations.
    known_strata : bool
        Use stratum indicators from known histories instead of conditional
        probabilities.
    init : StepFunctionSet, optional
        Starting parameters; defaults to zero coefficients and a flat baseline.

    Raises
    ------
    DivergenceError
        The relative change grew five iterations in a row.
    FitError
        No usable solve point in some coefficient group.
    """
    if weights is not None and (np.ndim(weights) != 1 or np.any(np.asarray(weights) < 0)):
        raise DomainError("fit takes one non-negative weight vector; use fit_batch for replicates")
    eq = EstimatingEquations(cohort, census, spec, weights=weights, known_strata=known_strata)
    return _single(eq, _run(eq, init, max_iterations=max_iterations))


def fit_batch(cohort: Cohort, census: CensusTable, spec: ModelSpec, weights, init=None,
              max_iterations: int | None = None, known_strata: bool = False,
              accelerate: bool = False) -> BatchFit:
    """Fit one replicate per row of ``weights`` (R, n) in a single vectorized pass."""
    eq = EstimatingEquations(cohort, census, spec, weights=weights, known_strata=known_strata)
    return _run(eq, init, max_iterations=max_iterations, accelerate=accelerate)


def fit_submodel(name: str, cohort: Cohort, census: CensusTable, **spec_kwargs) -> FitResult:
    """Fit a submodel by its three-letter name, e.g. ``"SSV"`` or ``"NNC"``."""
    return fit(cohort, census, ModelSpec.from_name(name, **spec_kwargs))


# ---------------------------------------------------------------------------
# single-point operations

def _probabilities_under(eq: EstimatingEquations, params):
    if params is None:
        params = initial_params(eq)
    with np.errstate(invalid="ignore"):
        p_subj, p_census = eq.probabilities(params.beta[None], params.baseline[None])
    if not (np.all(np.isfinite(p_subj)) and np.all(np.isfinite(p_census))):
        raise DegenerateProbabilityError("stratum probabilities undefined under these parameters")
    return p_subj, p_census


def _point_terms(eq: EstimatingEquations, a, s, probs, params):
    p_subj, p_census = _probabilities_under(eq, params)
    if probs is not None:
        p_subj = p_subj.copy()
        p_subj[0, s - 1] = np.asarray(probs, dtype=float)
    sub = EstimatingEquations.__new__(EstimatingEquations)
    sub.__dict__.update(eq.__dict__)
    sub.points = np.array([float(a)])
    sub.point_cells = eq.grid.cell_index(sub.points)
    sub._set_pairs()
    return sub, sub.terms([s - 1], p_subj, p_census)


def _check_point(spec: ModelSpec, a, s, S):
    if spec.coef_time_varying and not spec.tau_left_units <= a <= spec.tau_right_units:
        raise DomainError(f"target age {a} outside [tau_left, tau_right]")
    if not 1 <= s <= S:
        raise DomainError(f"stratum {s} undefined")


def _gamma_batch(gamma, p):
    return np.asarray(gamma, dtype=float).reshape(1, 1, p)  # (G=1, R=1, p)


def score_partial_strata(gamma, a: float, s: int, cohort: Cohort, census: CensusTable,
                         probs=None, spec: ModelSpec | None = None,
                         params: StepFunctionSet | None = None, weights=None) -> np.ndarray:
    """Score for ``gamma`` at target age ``a`` in stratum ``s``.

    ``probs`` overrides the subject probabilities of stratum ``s`` at every
    observed event (array of length E); by default they are the
    conditional probabilities under ``params``. Census stratum
    probabilities always come from ``params``.
    """
    spec = spec or ModelSpec()
    eq = EstimatingEquations(cohort, census, spec, weights=weights)
    _check_point(spec, a, s, eq.S)
    sub, terms = _point_terms(eq, a, s, probs, params)
    if not sub.total_weight(terms)[0, 0] > 0:
        raise InsufficientDataError(f"no kernel-weighted events in stratum {s} near age {a}")
    U, _ = sub.score_jacobian(terms, _gamma_batch(gamma, eq.p))
    return U[0, 0]


def score_known_strata(gamma, a: float, s: int, cohort: Cohort, census: CensusTable,
                       spec: ModelSpec | None = None, params: StepFunctionSet | None = None,
                       weights=None) -> np.ndarray:
    """Score with stratum indicators computed from fully observed histories."""
    spec = spec or ModelSpec()
    eq = EstimatingEquations(cohort, census, spec, weights=weights, known_strata=True)
    _check_point(spec, a, s, eq.S)
    p_subj, _ = _probabilities_under(eq, params)
    return score_partial_strata(gamma, a, s, cohort, census, p_subj[0, s - 1], spec, params,
                                weights)


def score_jacobian_at(gamma, a, s, cohort, census, probs=None, spec=None, params=None):
    """Score and analytic Jacobian at a single target age."""
    spec = spec or ModelSpec()
    eq = EstimatingEquations(cohort, census, spec)
    _check_point(spec, a, s, eq.S)
    sub, terms = _point_terms(eq, a, s, probs, params)
    U, J = sub.score_jacobian(terms, _gamma_batch(gamma, eq.p))
    return U[0, 0], J[0, 0]


def solve_beta_at(a: float, s: int, cohort: Cohort, census: CensusTable, probs=None,
                  spec: ModelSpec | None = None, params: StepFunctionSet | None = None,
                  init=None) -> np.ndarray:
    """Root of the stratum-``s`` score at target age ``a`` by Newton's method."""
    spec = spec or ModelSpec()
    eq = EstimatingEquations(cohort, census, spec)
    _check_point(spec, a, s, eq.S)
    sub, terms = _point_terms(eq, a, s, probs, params)
    g0 = np.zeros((1, 1, eq.p)) if init is None else _gamma_batch(init, eq.p)
    res = sub.newton(terms, g0)
    code = int(res.status[0, 0])
    if code == INSUFFICIENT:
        raise InsufficientDataError(f"no kernel-weighted events in stratum {s} near age {a}")
    if code == RANK_DEFICIENT:
        raise RankDeficiencyError(f"singular score Jacobian at age {a}, stratum {s}")
    if code == UNIDENTIFIED:
        raise RankDeficiencyError(f"score has no finite root at age {a}, stratum {s} "
                                  "(vanishing information)")
    if code == NOT_CONVERGED:
        raise ConvergenceError(f"Newton did not converge at age {a}, stratum {s}")
    return res.gamma[0, 0]


def breslow_baseline(beta, s: int, cohort: Cohort, census: CensusTable, probs=None,
                     spec: ModelSpec | None = None,
                     params: StepFunctionSet | None = None) -> np.ndarray:
    """Cumulative baseline of stratum ``s`` at the grid edges given coefficients.

    ``beta`` is a full-grid coefficient array (S, G, p) or a
    :class:`StepFunctionSet`. Census stratum probabilities come from
    ``params`` (default: ``beta`` with a flat initial baseline).
    """
    spec = spec or ModelSpec()
    eq = EstimatingEquations(cohort, census, spec)
    if isinstance(beta, StepFunctionSet):
        beta = beta.beta
    beta = np.asarray(beta, dtype=float)
    if params is None:
        params = initial_params(eq).with_updates(beta=beta)
    p_subj, p_census = _probabilities_under(eq, params)
    if probs is not None:
        p_subj = p_subj.copy()
        p_subj[0, s - 1] = np.asarray(probs, dtype=float)
    cum, _, _ = eq.breslow(beta[None], p_subj, p_census)
    return cum[0, s - 1]
