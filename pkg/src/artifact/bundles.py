"""Affine jet fibers over finite point clouds and discrete Glaeser refinement.

A fiber H(x) = f(x) + I(x) is stored in the coordinates of
``JetVector.to_vector`` as an offset plus an orthonormal basis (rows) of
the direction space.  An empty fiber has ``offset is None``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog
from scipy.spatial import cKDTree

from .jetcore import JetSpace, JetVector, derivative_functional

RANK_TOL = 1e-8


class BundleError(ValueError):
    pass


def _orthonormal_rows(G, rtol=RANK_TOL):
    G = np.atleast_2d(np.asarray(G, dtype=float))
    if G.size == 0:
        return np.zeros((0, G.shape[1] if G.ndim == 2 else 0))
    _, s, Vt = np.linalg.svd(G, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        return np.zeros((0, G.shape[1]))
    r = int((s > rtol * s[0]).sum())
    return Vt[:r]


class AffineFiber:
    """offset + span(generators) inside P^D at a base point."""

    __slots__ = ("space", "base", "offset", "generators")

    def __init__(self, space, base, offset, generators=None):
        self.space = space
        self.base = tuple(float(b) for b in base)
        d = space.D * space.dim
        if offset is None:
            self.offset = None
            self.generators = np.zeros((0, d))
            return
        self.offset = np.asarray(offset, dtype=float).reshape(d).copy()
        if generators is None:
            generators = np.zeros((0, d))
        self.generators = _orthonormal_rows(np.asarray(generators, dtype=float).reshape(-1, d))
        # keep the offset as the point of least norm in the affine set
        if self.generators.size:
            self.offset = self.offset - self.generators.T @ (self.generators @ self.offset)

    @classmethod
    def full(cls, space, base):
        d = space.D * space.dim
        return cls(space, base, np.zeros(d), np.eye(d))

    @classmethod
    def empty(cls, space, base):
        return cls(space, base, None)

    @classmethod
    def point(cls, space, base, vec):
        return cls(space, base, vec, None)

    @property
    def ambient(self):
        return self.space.D * self.space.dim

    @property
    def dim(self):
        return -1 if self.offset is None else self.generators.shape[0]

    @property
    def flag(self):
        if self.offset is None:
            return "empty"
        if self.generators.shape[0] == self.ambient:
            return "full"
        return "proper"

    @property
    def is_empty(self):
        return self.offset is None

    def offset_jet(self):
        if self.offset is None:
            return None
        return JetVector.from_vector(self.base, self.space, self.offset)

    def generator_jets(self):
        return [JetVector.from_vector(self.base, self.space, g) for g in self.generators]

    def project(self, vec):
        v = np.asarray(vec, dtype=float) - self.offset
        return self.offset + self.generators.T @ (self.generators @ v)

    def distance(self, vec):
        """Euclidean distance from a coefficient vector (or JetVector) to the fiber."""
        if isinstance(vec, JetVector):
            vec = vec.to_vector()
        if self.offset is None:
            return math.inf
        vec = np.asarray(vec, dtype=float)
        return float(np.linalg.norm(vec - self.project(vec)))

    def contains(self, vec, tol=1e-8):
        return self.distance(vec) <= tol

    def subset_of(self, other, tol=1e-8):
        """True when this affine set lies inside ``other``."""
        if self.offset is None:
            return True
        if other.offset is None:
            return False
        if other.distance(self.offset) > tol:
            return False
        for g in self.generators:
            resid = g - other.generators.T @ (other.generators @ g)
            if np.linalg.norm(resid) > tol:
                return False
        return True

    def same_as(self, other, tol=1e-8):
        if self.is_empty or other.is_empty:
            return self.is_empty and other.is_empty
        return self.dim == other.dim and self.subset_of(other, tol) and other.subset_of(self, tol)

    def __repr__(self):
        return f"AffineFiber(base={self.base}, flag={self.flag}, dim={self.dim})"


def value_functional(space, base, point, component=0, alpha=None):
    """Row acting on fiber coordinates that returns d^alpha P_component(point)."""
    alpha = tuple(alpha) if alpha is not None else (0,) * space.n
    row = np.zeros(space.D * space.dim)
    w = derivative_functional(space, alpha, base, point)
    row[component * space.dim:(component + 1) * space.dim] = w
    return row


def fiber_from_constraints(rows, space, base, tol=1e-10):
    """Affine set cut out by linear equations on jet coordinates.

    ``rows`` is a list of (functional, rhs).  The offset is the least-norm
    solution, the generators an orthonormal kernel basis.  An inconsistent
    system yields an empty fiber.
    """
    d = space.D * space.dim
    if not rows:
        return AffineFiber.full(space, base)
    A = np.array([np.asarray(r, dtype=float).reshape(d) for r, _ in rows])
    b = np.array([float(v) for _, v in rows])
    U, s, Vt = np.linalg.svd(A, full_matrices=True)
    r = int((s > RANK_TOL * s[0]).sum()) if s.size and s[0] > 0 else 0
    x = Vt[:r].T @ ((U[:, :r].T @ b) / s[:r]) if r else np.zeros(d)
    resid = np.linalg.norm(A @ x - b)
    if resid > tol * (1 + np.linalg.norm(b)) * max(1.0, s[0] if s.size else 1.0):
        return AffineFiber.empty(space, base)
    return AffineFiber(space, base, x, Vt[r:])


def _monomial_matrix(space, alpha):
    """Matrix of P -> (x - base)^alpha (.) P on one component."""
    I, J, K = space.product_table()
    i0 = space.position(alpha)
    S = np.zeros((space.dim, space.dim))
    for i, j, k in zip(I, J, K):
        if i == i0:
            S[k, j] = 1.0
    return S


def module_closure(f, base=None):
    """Extend the generators until their span is closed under multiplication
    by every monomial of degree <= m (componentwise, truncated at base)."""
    if f.is_empty:
        raise BundleError("module closure of an empty fiber")
    space = f.space
    d = space.dim
    mats = [_monomial_matrix(space.scalar(), a) for a in space.indices if sum(a) > 0]
    G = f.generators
    while True:
        new = [G]
        for S in mats:
            blocks = [G[:, k * d:(k + 1) * d] @ S.T for k in range(space.D)]
            new.append(np.hstack(blocks))
        G2 = _orthonormal_rows(np.vstack(new))
        if G2.shape[0] == G.shape[0]:
            break
        G = G2
    return AffineFiber(space, f.base, f.offset, G)


@dataclass
class SampledBundle:
    space: JetSpace
    points: np.ndarray
    fibers: list

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if self.points.shape[1] != self.space.n:
            raise BundleError("points do not live in R^n")
        if len(self.fibers) != len(self.points):
            raise BundleError("one fiber per point is required")
        for f in self.fibers:
            if f.space != self.space:
                raise BundleError("all fibers must share the bundle's jet space")

    def restrict(self, idx):
        idx = list(idx)
        return SampledBundle(self.space, self.points[idx], [self.fibers[i] for i in idx])


@dataclass
class RefinementParams:
    k: int = None
    radii: int = 8
    factor: float = 0.5
    threshold: float = 0.25
    finest_radius: float = None
    min_scales: int = 4
    offset_tol: float = 1e-9


@dataclass
class RefinementReport:
    iterations: int = 0
    emptied_points: list = field(default_factory=list)
    fiber_dims_before: list = field(default_factory=list)
    fiber_dims_after: list = field(default_factory=list)
    decay_fits: dict = field(default_factory=dict)
    refined_points: list = field(default_factory=list)
    flagged: list = field(default_factory=list)
    stable: bool = False


def _slope(deltas, vals, floor):
    """Log-log slope of vals against deltas; vals below floor count as exact zeros."""
    vals = np.asarray(vals, dtype=float)
    if np.all(vals <= floor):
        return math.inf
    v = np.maximum(vals, floor)
    return float(np.polyfit(np.log(deltas), np.log(v), 1)[0])


def _tuple_size(space, params):
    return params.k or 2 * space.D * space.dim + 1


@dataclass
class DecayResult:
    """Affine set {u : |M_t u - e_t| -> 0} recovered from a scale ladder."""

    ok: bool
    offset: np.ndarray
    free: np.ndarray
    pinned: int
    direction_slopes: list
    offset_slope: float


def decay_subspace(Ms, es, ds, threshold=0.25):
    """Split coordinates into directions along which |M_t v| decays as
    d_t -> 0 (free) and the rest (pinned), then locate the offset.

    The offset's pinned coordinates are the per-scale least-squares
    minimizers extrapolated linearly in d_t to d = 0 from the finest half
    of the ladder.  ``ok`` is False when the residual at that offset does
    not decay (log-log slope <= threshold).
    """
    ds = np.asarray(ds, dtype=float)
    r0 = Ms[0].shape[1]
    free = np.zeros((r0, 0))
    pinned = np.eye(r0)
    slopes = []
    half = max(2, len(Ms) // 2)
    if r0:
        S = np.vstack([M / max(np.linalg.norm(M), 1e-300) for M in Ms[-half:]])
        _, _, Vt = np.linalg.svd(S, full_matrices=True)
        floor = 1e-9 * max(max(np.linalg.norm(M) for M in Ms), 1e-300)
        keep, pin = [], []
        for v in Vt:
            sl = _slope(ds, [np.linalg.norm(M @ v) for M in Ms], floor)
            slopes.append(sl)
            (keep if sl > threshold else pin).append(v)
        free = np.array(keep).T.reshape(r0, len(keep))
        pinned = np.array(pin).T.reshape(r0, len(pin))
    p = pinned.shape[1]
    u = np.zeros(r0)
    if p:
        # the split above averages over the finest half and so is tilted by
        # O(d); per-scale splits extrapolated to d = 0 remove that tilt
        nf = r0 - p
        X = np.vander(ds[-half:], min(3, half - 1), increasing=True)
        Ps, U = [], []
        for M, e in zip(Ms[-half:], es[-half:]):
            _, _, Vt_t = np.linalg.svd(M / max(np.linalg.norm(M), 1e-300), full_matrices=True)
            Qt = Vt_t[:p].T
            Ps.append(Vt_t[p:].T @ Vt_t[p:])
            U.append(Qt @ np.linalg.lstsq(M @ Qt, e, rcond=None)[0])
        P0 = np.linalg.lstsq(X, np.array(Ps).reshape(half, -1), rcond=None)[0][0].reshape(r0, r0)
        u = np.linalg.lstsq(X, np.array(U), rcond=None)[0][0]
        if nf:
            w, V = np.linalg.eigh(0.5 * (P0 + P0.T))
            free = V[:, np.argsort(w)[::-1][:nf]]
            pinned = np.linalg.svd(np.eye(r0) - free @ free.T)[0][:, :p]
        u = u - free @ (free.T @ u)
    sig = [np.linalg.norm(M @ u - e) for M, e in zip(Ms, es)]
    floor = 1e-10 * max(max((np.linalg.norm(e) for e in es), default=0.0), 1e-300)
    sl = _slope(ds, sig, floor)
    return DecayResult(bool(sl > threshold), u, free, int(p), slopes, sl)


def _ladder(bundle, params):
    fin = params.finest_radius
    if fin is None:
        pts = bundle.points
        if len(pts) < 2:
            return None
        # finest scale: smallest ball around a sample that holds a full tuple
        kk = min(_tuple_size(bundle.space, params), len(pts) - 1)
        dist, _ = cKDTree(pts).query(pts, k=kk + 1)
        dist = dist.reshape(len(pts), kk + 1)
        pos = dist[:, kk][dist[:, kk] > 0]
        if pos.size == 0:
            return None
        fin = float(pos.min())
    T = params.radii
    return fin * (1.0 / params.factor) ** np.arange(T - 1, -1, -1)


def _pair_rows(space, pts, bases, offsets, gens):
    """Whitney-quotient rows for every ordered pair of the tuple.

    Returns (A, c, blocks): residual = A z + c with z the stacked fiber
    coordinates of the tuple members.
    """
    n_pts = len(pts)
    widths = [g.shape[0] for g in gens]
    starts = np.concatenate([[0], np.cumsum(widths)])
    rows, consts = [], []
    m = space.m
    d = space.dim
    for a, b in itertools.permutations(range(n_pts), 2):
        dist = float(np.linalg.norm(pts[a] - pts[b]))
        for alpha in space.indices:
            wa = derivative_functional(space, alpha, bases[a], pts[a])
            wb = derivative_functional(space, alpha, bases[b], pts[a])
            scale = dist ** (m - sum(alpha))
            for k in range(space.D):
                ra = np.zeros(space.D * d)
                rb = np.zeros(space.D * d)
                ra[k * d:(k + 1) * d] = wa
                rb[k * d:(k + 1) * d] = wb
                row = np.zeros(starts[-1])
                row[starts[a]:starts[a + 1]] = gens[a] @ ra
                row[starts[b]:starts[b + 1]] -= gens[b] @ rb
                rows.append(row / scale)
                consts.append((ra @ offsets[a] - rb @ offsets[b]) / scale)
    return np.array(rows), np.array(consts), starts


def _scale_system(bundle, i, tup):
    """Reduced system sigma(u) = |M u - e| after minimizing over the neighbours."""
    space = bundle.space
    idx = [i] + list(tup)
    pts = bundle.points[idx]
    fibers = [bundle.fibers[j] for j in idx]
    A, c, starts = _pair_rows(space, pts, [f.base for f in fibers],
                              [f.offset for f in fibers], [f.generators for f in fibers])
    r0 = starts[1]
    Au, Ac = A[:, :r0], A[:, r0:]
    if Ac.shape[1]:
        Q = _orthonormal_rows(Ac.T, 1e-12)
        proj = lambda v: v - Q.T @ (Q @ v)
    else:
        proj = lambda v: v
    M = proj(Au) if Au.shape[1] else np.zeros((A.shape[0], 0))
    e = -proj(c)
    return M, e


def _refine_point(bundle, i, ladder, tree, params):
    f0 = bundle.fibers[i]
    x0 = bundle.points[i]
    space = bundle.space
    k = min(_tuple_size(space, params), len(bundle.points) - 1)
    if f0.is_empty:
        return f0, {"status": "empty"}
    cand = tree.query_ball_point(x0, ladder[0] * (1 + 1e-12))
    cand = [j for j in cand if j != i]
    if not cand:
        return f0, {"status": "isolated"}
    dist = np.linalg.norm(bundle.points[cand] - x0, axis=1)
    # annulus occupancy decides whether x0 behaves like a limit point
    # only scales whose ball holds a full tuple are used
    scales, occupied = [], []
    for t, dl in enumerate(ladder):
        if (dist <= dl * (1 + 1e-12)).sum() < k:
            continue
        scales.append(t)
        occupied.append(bool(np.any((dist > dl * params.factor * (1 + 1e-12)) & (dist <= dl * (1 + 1e-12)))))
    if len(scales) < params.min_scales or not all(occupied[-params.min_scales:]):
        return f0, {"status": "isolated"}
    scales = [t for t, ok in zip(scales, occupied) if ok]
    Ms, es, ds = [], [], []
    for t in scales:
        dl = ladder[t]
        inside = [(dd, j) for dd, j in zip(dist, cand) if dd <= dl * (1 + 1e-12)]
        inside.sort(key=lambda p: (-p[0], p[1]))
        tup = [j for _, j in inside[:k]]
        if any(bundle.fibers[j].is_empty for j in tup):
            return AffineFiber.empty(space, f0.base), {"status": "empty-neighbour"}
        M, e = _scale_system(bundle, i, tup)
        if not (np.all(np.isfinite(M)) and np.all(np.isfinite(e))):
            return f0, {"status": "ill-conditioned"}
        Ms.append(M)
        es.append(e)
        ds.append(dl)
    dec = decay_subspace(Ms, es, ds, params.threshold)
    info = {"status": "refined", "direction_slopes": dec.direction_slopes,
            "offset_slope": dec.offset_slope, "pinned": dec.pinned, "free": dec.free.shape[1]}
    if not dec.ok:
        return AffineFiber.empty(space, f0.base), info
    u, free = dec.offset, dec.free
    offset = f0.offset + f0.generators.T @ u
    gens = free.T @ f0.generators if free.shape[1] else None
    return AffineFiber(space, f0.base, offset, gens), info


def glaeser_refine_once(b, params=None):
    """One bulk-synchronous pass of the discrete Glaeser refinement."""
    params = params or RefinementParams()
    report = RefinementReport(iterations=1)
    report.fiber_dims_before = [f.dim for f in b.fibers]
    ladder = _ladder(b, params)
    if ladder is None:
        report.fiber_dims_after = list(report.fiber_dims_before)
        return SampledBundle(b.space, b.points.copy(), list(b.fibers)), report
    tree = cKDTree(b.points)
    new = []
    for i in range(len(b.points)):
        f, info = _refine_point(b, i, ladder, tree, params)
        if info.get("status") in ("refined", "empty-neighbour"):
            report.refined_points.append(i)
            report.decay_fits[i] = info
        if info.get("status") == "ill-conditioned":
            report.flagged.append(i)
        if f.is_empty and not b.fibers[i].is_empty:
            report.emptied_points.append(i)
        new.append(f)
    report.fiber_dims_after = [f.dim for f in new]
    return SampledBundle(b.space, b.points.copy(), new), report


def _same_bundle(a, b, tol):
    return all(fa.same_as(fb, tol) for fa, fb in zip(a.fibers, b.fibers))


def iterate_to_stability(b, lstar_cap=10, params=None):
    """Repeat refinement until no fiber changes or the cap is reached."""
    params = params or RefinementParams()
    if lstar_cap < 1:
        raise BundleError("lstar_cap must be at least 1")
    total = RefinementReport()
    total.fiber_dims_before = [f.dim for f in b.fibers]
    cur = b
    for it in range(1, lstar_cap + 1):
        nxt, rep = glaeser_refine_once(cur, params)
        total.iterations = it
        total.emptied_points.extend(p for p in rep.emptied_points if p not in total.emptied_points)
        total.decay_fits.update(rep.decay_fits)
        total.flagged.extend(p for p in rep.flagged if p not in total.flagged)
        total.refined_points = sorted(set(total.refined_points) | set(rep.refined_points))
        same = _same_bundle(cur, nxt, params.offset_tol * 10)
        cur = nxt
        if same:
            total.stable = True
            break
    total.fiber_dims_after = [f.dim for f in cur.fibers]
    return cur, total


def _tuple_feasible(b, idx, M):
    space = b.space
    fibers = [b.fibers[i] for i in idx]
    pts = b.points[idx]
    gens = [f.generators for f in fibers]
    offs = [f.offset for f in fibers]
    widths = [g.shape[0] for g in gens]
    starts = np.concatenate([[0], np.cumsum(widths)])
    nz = int(starts[-1])
    A_ub, b_ub = [], []
    d = space.dim
    for a, f in enumerate(fibers):
        for alpha in space.indices:
            w = derivative_functional(space, alpha, f.base, pts[a])
            for k in range(space.D):
                r = np.zeros(space.D * d)
                r[k * d:(k + 1) * d] = w
                row = np.zeros(nz)
                row[starts[a]:starts[a + 1]] = gens[a] @ r
                c = r @ offs[a]
                A_ub += [row, -row]
                b_ub += [M - c, M + c]
    if len(idx) > 1:
        A, c, _ = _pair_rows(space, pts, [f.base for f in fibers], offs, gens)
        for row, cc in zip(A, c):
            A_ub += [row, -row]
            b_ub += [M - cc, M + cc]
    A_ub = np.array(A_ub)
    b_ub = np.array(b_ub)
    if nz == 0:
        return bool(np.all(b_ub >= -1e-12))
    # a least-squares witness settles most tuples without an LP
    G = A_ub[0::2]
    c0 = (M - b_ub[0::2])
    z, *_ = np.linalg.lstsq(G, -c0, rcond=None)
    if np.all(A_ub @ z <= b_ub + 1e-12):
        return True
    res = linprog(np.zeros(nz), A_ub=A_ub, b_ub=b_ub, bounds=[(None, None)] * nz, method="highs")
    return res.status == 0


def finiteness_certificate(b, M, khash, seed=0, max_tuples=10_000):
    """Per-tuple feasibility of the bounded-jet, bounded-quotient system."""
    if any(f.is_empty for f in b.fibers):
        return False
    P = len(b.points)
    k = min(khash, P)
    total = math.comb(P, k)
    if total <= max_tuples:
        tuples = itertools.combinations(range(P), k)
    else:
        rng = np.random.default_rng(seed)
        tuples = (tuple(sorted(rng.choice(P, size=k, replace=False))) for _ in range(max_tuples))
    for tup in tuples:
        if not _tuple_feasible(b, list(tup), M):
            return False
    return True


def dyadic_fixture(values, K=40, m=1):
    """E = {0} u {2^-k : 0 <= k <= K} on the line with prescribed values.

    The fiber at 2^-k is {P : P(2^-k) = values(2^-k)}; the fiber at 0 is
    {P : P(0) = values(0)}.
    """
    space = JetSpace(1, m, 1)
    xs = np.concatenate([[0.0], 2.0 ** -np.arange(K + 1)])
    fibers = []
    for x in xs:
        row = value_functional(space, (x,), (x,))
        fibers.append(fiber_from_constraints([(row, float(values(x)))], space, (x,)))
    return SampledBundle(space, xs[:, None], fibers)


def square_fixture(K=40):
    return dyadic_fixture(lambda x: x * x, K)


def oscillating_fixture(K=40):
    def f(x):
        if x == 0:
            return 0.0
        k = int(round(-math.log2(x)))
        return (-1) ** k * x
    return dyadic_fixture(f, K)


def kollar_nowak_coefficients(z):
    x1, x2, x3 = z
    return x1 ** 3 * x2, x1 ** 3 - (1 + x3 ** 2) * x2 ** 3, x1 ** 4


def kollar_nowak_bundle(grid=9, lo=-1.0, hi=1.0):
    """m = 0, D = 2 bundle of pointwise solutions of a P1 + b P2 = x1^4 on a grid cube."""
    space = JetSpace(3, 0, 2)
    g = np.linspace(lo, hi, grid)
    pts = np.array(list(itertools.product(g, g, g)))
    fibers = []
    for z in pts:
        a, bb, c = kollar_nowak_coefficients(z)
        fibers.append(fiber_from_constraints([(np.array([a, bb]), c)], space, tuple(z)))
    return SampledBundle(space, pts, fibers)


def section_distances(b, jets):
    """Per-point distance of given jet vectors (or coefficient arrays) to the fibers."""
    return np.array([f.distance(j) for f, j in zip(b.fibers, jets)])


def candidate_residuals(b, candidate):
    """Distances of a candidate field's jets to the fibers.

    ``candidate(point)`` returns the coefficient vector of the jet at that
    point (for m = 0 simply the D values).
    """
    return section_distances(b, [np.asarray(candidate(tuple(p)), dtype=float) for p in b.points])
