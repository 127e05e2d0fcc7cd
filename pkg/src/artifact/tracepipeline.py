"""Two-dimensional section synthesis inside the wedge {0 <= y <= x}.

A ``WedgeNormalForm`` lists the critical curves 0 = psi_0 < ... < psi_S = x,
per-strip systems  F_{pi i} + sum_j A_ij F_{pi j} = phi_i  and per-curve
systems  sum Theta_jl(x) d_y^l F_j(x, psi_s(x)) = g(x).  The unknowns are
the traces xi^s_jl(x) = d_y^l F_j(x, psi_s(x)).  Per abscissa x the traces
are chosen by a linear program (exact rows as equalities, asymptotic and
Taylor-link rows in an l1 objective) followed by a minimum-norm pick among
near-minimizers; the sampled traces are fitted by Puiseux polynomials and
turned into a field by Taylor polynomials in y patched across each strip.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.optimize import linprog, minimize

from .bundles import AffineFiber, SampledBundle, decay_subspace
from .elimination import ParamLinearSystem, eliminate
from .hellyselect import SeminormFamily, null_space_reduce, select_representatives, verify_domination
from .jetcore import JetArray, JetSpace
from .patching import (FieldPiece, CuspRegion, PatchError, _origin_jet_zero, cm_verify,
                       make_cutoff, patch_cusp, wedge_extend)
from .puiseux import CurveLadder, PuiseuxPoly, curve_ladder_validate

PROBES = 8
MIN_PROBES = 6


class PipelineError(ValueError):
    pass


@dataclass
class CurveRow:
    """sum_{(j,l)} theta[(j,l)](x) d_y^l F_j(x, psi_s(x)) = g(x)."""

    theta: dict
    g: PuiseuxPoly


@dataclass
class StripSystem:
    """F_{perm[i]} + sum_j A[i][j] F_{perm[k+j]} = phi[i] for i < k.

    ``A(X, Y)`` returns a k x (D-k) nested list and ``phi(X, Y)`` a list of
    length k; entries are jet carriers or plain numbers.
    """

    k: int
    perm: tuple
    A: object = None
    phi: object = None


def trivial_strip(D):
    return StripSystem(0, tuple(range(D)))


@dataclass
class WedgeNormalForm:
    ladder: CurveLadder
    D: int
    m: int
    strips: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)
    origin_zero: bool = True

    @property
    def smax(self):
        return len(self.ladder.curves) - 1

    @property
    def psi(self):
        return self.ladder.curves

    def strip(self, s):
        return self.strips.get(s) or trivial_strip(self.D)

    @property
    def n_unknowns(self):
        return (self.smax + 1) * self.D * (self.m + 1)

    def index(self, s, j, l):
        if not (0 <= s <= self.smax and 0 <= j < self.D and 0 <= l <= self.m):
            raise PipelineError(f"trace index ({s}, {j}, {l}) out of range")
        return ((s * self.D) + j) * (self.m + 1) + l

    def validate(self):
        ok, delta = curve_ladder_validate(self.ladder)
        if not ok:
            raise PipelineError("curve ladder is not ordered 0 = psi_0 < ... < psi_S = x")
        for s, st in self.strips.items():
            if not 1 <= s <= self.smax:
                raise PipelineError(f"strip index {s} out of range")
            if sorted(st.perm) != list(range(self.D)) or not 0 <= st.k <= self.D:
                raise PipelineError(f"strip {s}: bad permutation or depth")
        for s, rows in self.curves.items():
            if not 0 <= s <= self.smax:
                raise PipelineError(f"curve index {s} out of range")
            for r in rows:
                for (j, l) in r.theta:
                    self.index(s, j, l)
        return delta


def _as_jet(v, sp, P):
    if isinstance(v, JetArray):
        return v
    return JetArray.const(sp, float(v), P)


# ---------------------------------------------------------------- axis bundles

@dataclass
class AxisBundleSpec:
    """One side of one strip, in the coordinate ybar >= 0 measured from the curve.

    side "+" sits on psi_s with y = psi_s - ybar; side "-" on psi_{s-1} with
    y = psi_{s-1} + ybar.  P_j are the independent components, Q_i the
    dependent ones with Q_i ~ sum_j A_ij P_j + B_i, A = -A^s and B = phi^s.
    """

    nf: WedgeNormalForm
    s: int
    side: str
    xbars: np.ndarray
    probes: int = PROBES

    @property
    def strip(self):
        return self.nf.strip(self.s)

    @property
    def curve(self):
        return self.s if self.side == "+" else self.s - 1

    @property
    def I(self):
        return self.strip.k

    @property
    def J(self):
        return self.nf.D - self.strip.k

    @property
    def dimz(self):
        return (self.I + self.J) * (self.nf.m + 1)

    def width(self, x):
        return self.nf.psi[self.s].evaluate(x) - self.nf.psi[self.s - 1].evaluate(x)

    def probe_heights(self, xbar):
        return 0.5 * self.width(xbar) * 0.5 ** np.arange(self.probes)

    def coefficients(self, xbar, ys):
        """Taylor coefficients in ybar of A (I, J, m+1, P) and B (I, m+1, P)."""
        m = self.nf.m
        ys = np.asarray(ys, dtype=float)
        P = ys.size
        I, J = self.I, self.J
        if I == 0:
            return np.zeros((0, J, m + 1, P)), np.zeros((0, m + 1, P))
        sp = JetSpace(1, m)
        Yb = JetArray.variable(sp, ys, 0)
        X = JetArray.const(sp, xbar, P)
        c = self.nf.psi[self.curve].evaluate(xbar)
        Y = c - Yb if self.side == "+" else Yb + c
        st = self.strip
        Araw = st.A(X, Y) if st.A is not None else [[0.0] * J for _ in range(I)]
        Braw = st.phi(X, Y) if st.phi is not None else [0.0] * I
        A = np.zeros((I, J, m + 1, P))
        B = np.zeros((I, m + 1, P))
        for i in range(I):
            for j in range(J):
                A[i, j] = -_as_jet(Araw[i][j], sp, P).c
            B[i] = _as_jet(Braw[i], sp, P).c
        return A, B


def _shift_table(y, m):
    """T[d, b] = binom(b, d) y^(b-d): Taylor coefficient d at y of ybar^b."""
    T = np.zeros((m + 1, m + 1))
    for b in range(m + 1):
        for d in range(b + 1):
            T[d, b] = math.comb(b, d) * y ** (b - d)
    return T


def defect_rows(spec, xbar, ys):
    """Affine maps z -> y^(a-m) d^a {sum_j A_ij P_j + B_i - Q_i}(y) for every probe.

    Returns (M, c) with shapes (P, I*(m+1), dimz) and (P, I*(m+1)); rows are
    ordered (i, a).
    """
    m = spec.nf.m
    ys = np.atleast_1d(np.asarray(ys, dtype=float))
    A, B = spec.coefficients(xbar, ys)
    I, J = spec.I, spec.J
    M = np.zeros((ys.size, I * (m + 1), spec.dimz))
    c = np.zeros((ys.size, I * (m + 1)))
    for t, y in enumerate(ys):
        T = _shift_table(y, m)
        for i in range(I):
            for a in range(m + 1):
                r = i * (m + 1) + a
                w = y ** (a - m) * math.factorial(a)
                for j in range(J):
                    row = np.zeros(m + 1)
                    for cc in range(a + 1):
                        row += A[i, j, cc, t] * T[a - cc]
                    M[t, r, j * (m + 1):(j + 1) * (m + 1)] = w * row
                M[t, r, (J + i) * (m + 1):(J + i + 1) * (m + 1)] = -w * T[a]
                c[t, r] = w * B[i, a, t]
    return M, c


def build_axis_bundle(spec):
    """Per xbar, the affine set of (P, Q) in p^(J+I) whose defect decays as ybar -> 0.

    The fibers are jets in ybar at ybar = 0 (based at 0); the bundle points
    are the xbar values.
    """
    if spec.probes < MIN_PROBES:
        raise PipelineError(f"probe ladder needs at least {MIN_PROBES} points, got {spec.probes}")
    m = spec.nf.m
    space = JetSpace(1, m, spec.I + spec.J)
    fibers = []
    for xb in spec.xbars:
        if spec.I == 0:
            fibers.append(AffineFiber.full(space, (0.0,)))
            continue
        ys = spec.probe_heights(xb)
        M, c = defect_rows(spec, xb, ys)
        dec = decay_subspace(list(M), list(-c), ys)
        if not dec.ok:
            fibers.append(AffineFiber.empty(space, (0.0,)))
        else:
            fibers.append(AffineFiber(space, (0.0,), dec.offset, dec.free.T if dec.free.size else None))
    return SampledBundle(space, np.asarray(spec.xbars, dtype=float)[:, None], fibers)


@dataclass
class HeightSelection:
    indices: list
    heights: list
    constants: list
    y1_ok: bool
    y2_ok: bool


def select_sample_heights(spec, xbars=None, sigma_max=None, samples=2000):
    """Pick probe heights whose defect seminorms dominate all probes.

    Each (probe, i, a) defect row is a rank-one seminorm; hellyselect picks
    a dominating subfamily per xbar and the union of the chosen probe
    indices is used at every xbar, so y_sigma(xbar) = width(xbar) 2^(-t-1)
    is a Puiseux polynomial.
    """
    xbars = spec.xbars if xbars is None else np.asarray(xbars, dtype=float)
    m = spec.nf.m
    chosen = set()
    consts = []
    if spec.I == 0:
        return HeightSelection([], [], [], True, True)
    if sigma_max is not None and sigma_max >= spec.probes:
        chosen = set(range(spec.probes))
        consts = [1.0] * len(xbars)
    else:
        for xb in xbars:
            ys = spec.probe_heights(xb)
            M, _ = defect_rows(spec, xb, ys)
            rows = M.reshape(-1, spec.dimz)
            owner = np.repeat(np.arange(len(ys)), M.shape[1])
            fam = SeminormFamily(spec.dimz, [r[None, :] for r in rows])
            quo, _, _, _ = null_space_reduce(fam)
            if quo.dim == 0:
                consts.append(1.0)
                continue
            sel = select_representatives(quo, samples=samples,
                                         max_members=sigma_max or 3 ** max(quo.dim, 1))
            rep = verify_domination(quo, sel, samples=samples)
            if not rep.ok:
                raise PipelineError(f"height domination failed at xbar={xb}: worst ratio {rep.worst_ratio}")
            consts.append(sel.C)
            chosen.update(int(owner[i]) for i in sel.indices)
    idx = sorted(chosen)
    w = spec.nf.psi[spec.s] - spec.nf.psi[spec.s - 1]
    heights = [w * Fraction(1, 2 ** (t + 1)) for t in idx]
    # (Y2) 0 < y_sigma < width <= xbar, (Y1) |y^(a)| <= C xbar^(1-a)
    y2 = True
    y1 = True
    for h in heights:
        hv = h.evaluate(xbars)
        wv = spec.width(xbars)
        y2 &= bool(np.all((hv > 0) & (hv < wv) & (wv <= xbars * (1 + 1e-12))))
        for a in range(m + 1):
            v = np.abs(h.evaluate(xbars, a)) * xbars ** (a - 1.0)
            y1 &= bool(np.all(np.isfinite(v)) and v[-1] <= 1.1 * v.max(initial=0.0) + 1e-300
                       and v[-1] <= 1.1 * v[0] + 1e-12)
    return HeightSelection(idx, heights, consts, y1, y2)


@dataclass
class TraceFunctionals:
    spec: AxisBundleSpec
    xbars: np.ndarray
    lam: list
    mu: list
    heights: HeightSelection
    fibers: SampledBundle


def build_trace_functionals(spec, heights=None):
    """lambda: exact affine maps cutting out the axis fiber; mu: the defect
    rows at the selected heights plus the flatness maps xbar^(a-m) d^a p_j(0)."""
    heights = heights or select_sample_heights(spec)
    fibers = build_axis_bundle(spec)
    m = spec.nf.m
    lam, mu = [], []
    for xb, f in zip(spec.xbars, fibers.fibers):
        if f.is_empty:
            lam.append(None)
        elif f.flag == "full":
            lam.append((np.zeros((0, spec.dimz)), np.zeros(0)))
        else:
            G = f.generators
            _, s, Vt = np.linalg.svd(G if G.size else np.zeros((1, spec.dimz)), full_matrices=True)
            r = G.shape[0]
            N = Vt[r:] if G.size else np.eye(spec.dimz)
            lam.append((N, N @ f.offset))
        rows, consts = [], []
        if heights.heights:
            ys = np.array([h.evaluate(xb) for h in heights.heights], dtype=float)
            M, c = defect_rows(spec, xb, ys)
            rows.append(M.reshape(-1, spec.dimz))
            consts.append(c.ravel())
        F = np.zeros((spec.J * (m + 1), spec.dimz))
        for j in range(spec.J):
            for a in range(m + 1):
                F[j * (m + 1) + a, j * (m + 1) + a] = xb ** (a - m) * math.factorial(a)
        rows.append(F)
        consts.append(np.zeros(F.shape[0]))
        mu.append((np.vstack(rows), np.concatenate(consts)))
    return TraceFunctionals(spec, np.asarray(spec.xbars, dtype=float), lam, mu, heights, fibers)


def side_map(nf, s, side):
    """Matrix Z with z = Z xi: jet coefficients of P, Q in ybar from the traces."""
    st = nf.strip(s)
    m = nf.m
    c = s if side == "+" else s - 1
    sgn = -1.0 if side == "+" else 1.0
    order = list(st.perm[st.k:]) + list(st.perm[:st.k])
    Z = np.zeros((nf.D * (m + 1), nf.n_unknowns))
    for blk, comp in enumerate(order):
        for a in range(m + 1):
            Z[blk * (m + 1) + a, nf.index(c, comp, a)] = sgn ** a / math.factorial(a)
    return Z


# ------------------------------------------------------------ constraint system

@dataclass
class TraceConstraintSystem:
    nf: WedgeNormalForm
    xs: np.ndarray
    exact: list
    asym: list
    link: list
    counts: dict

    def objective(self, i, xi):
        A, a = self.asym[i]
        L, c = self.link[i]
        return float(np.abs(A @ xi - a).sum() + np.abs(L @ xi - c).sum())


def default_ladder(delta, count=24, ratio=2 ** -0.5):
    return 0.5 * delta * ratio ** np.arange(count)


def _curve_rows(nf, x):
    rows, rhs = [], []
    for s in range(nf.smax + 1):
        for cr in nf.curves.get(s, []):
            r = np.zeros(nf.n_unknowns)
            for (j, l), th in cr.theta.items():
                r[nf.index(s, j, l)] += float(th.evaluate(x))
            rows.append(r)
            rhs.append(float(cr.g.evaluate(x)))
    return rows, rhs


def _link_rows(nf, x):
    m = nf.m
    rows = []
    for s in range(1, nf.smax + 1):
        dpsi = float(nf.psi[s].evaluate(x) - nf.psi[s - 1].evaluate(x))
        for j in range(nf.D):
            for l in range(m + 1):
                r = np.zeros(nf.n_unknowns)
                r[nf.index(s, j, l)] = 1.0
                for k in range(m - l + 1):
                    r[nf.index(s - 1, j, l + k)] -= dpsi ** k / math.factorial(k)
                rows.append(r / dpsi ** (m - l))
    return np.array(rows).reshape(-1, nf.n_unknowns)


def assemble_constraints(nf, tfs=None, xs=None):
    """Rows of the trace problem at every ladder abscissa.

    exact: curve systems and the lambda maps of both sides of every strip;
    asym: mu maps; link: Taylor links between consecutive curves, each
    divided by (psi_s - psi_{s-1})^(m-l).
    """
    delta = nf.validate()
    xs = default_ladder(delta) if xs is None else np.asarray(xs, dtype=float)
    if tfs is None:
        tfs = {}
        for s in range(1, nf.smax + 1):
            for side in "+-":
                tfs[(s, side)] = build_trace_functionals(AxisBundleSpec(nf, s, side, xs))
    for key, tf in tfs.items():
        if len(tf.xbars) != len(xs) or not np.allclose(tf.xbars, xs):
            raise PipelineError(f"trace functionals {key} built on a different x ladder")
    exact, asym, link = [], [], []
    counts = {"curve": 0, "lambda": 0, "mu": 0, "link": 0}
    for i, x in enumerate(xs):
        rows, rhs = _curve_rows(nf, x)
        counts["curve"] = len(rows)
        nlam = 0
        empty = False
        arows, arhs = [], []
        for (s, side), tf in sorted(tfs.items()):
            Z = side_map(nf, s, side)
            lam = tf.lam[i]
            if lam is None:
                empty = True
                continue
            N, b = lam
            for nrow, bb in zip(N, b):
                rows.append(nrow @ Z)
                rhs.append(bb)
                nlam += 1
            Mu, c = tf.mu[i]
            for mrow, cc in zip(Mu, c):
                arows.append(mrow @ Z)
                arhs.append(-cc)
        counts["lambda"] = nlam
        counts["mu"] = len(arows)
        E = np.array(rows).reshape(-1, nf.n_unknowns)
        e = np.array(rhs, dtype=float)
        if empty:
            # an empty axis fiber admits no traces at all
            E = np.vstack([E, np.zeros((1, nf.n_unknowns))])
            e = np.append(e, 1.0)
        exact.append((E, e))
        asym.append((np.array(arows).reshape(-1, nf.n_unknowns), np.array(arhs, dtype=float)))
        L = _link_rows(nf, x)
        counts["link"] = L.shape[0]
        link.append((L, np.zeros(L.shape[0])))
    return TraceConstraintSystem(nf, xs, exact, asym, link, counts)


# ------------------------------------------------------------------- selection

@dataclass
class SelectionOutcome:
    xs: np.ndarray
    xi: np.ndarray
    F_min: np.ndarray
    exponent: float
    fits: list = None
    fit_ok: bool = True
    exists: bool = True
    nonexistence: dict = None
    anomalies: list = field(default_factory=list)
    delta: float = None


def _norm_weights(nf, x):
    w = np.zeros(nf.n_unknowns)
    for s in range(nf.smax + 1):
        for j in range(nf.D):
            for l in range(nf.m + 1):
                w[nf.index(s, j, l)] = x ** (l - nf.m)
    return w


def _solve_one(sys, i):
    nf = sys.nf
    x = float(sys.xs[i])
    E, e = sys.exact[i]
    A, a = sys.asym[i]
    L, c = sys.link[i]
    R = np.vstack([A, L])
    r = np.concatenate([a, c])
    n, k = nf.n_unknowns, R.shape[0]
    if E.shape[0]:
        z, *_ = np.linalg.lstsq(E, e, rcond=None)
        if np.abs(E @ z - e).max() > 1e-9 * (1 + np.abs(e).max()):
            return None, None, "exact rows inconsistent"
    if k == 0:
        F_min = 0.0
        xi0 = np.linalg.lstsq(E, e, rcond=None)[0] if E.shape[0] else np.zeros(n)
    else:
        cost = np.concatenate([np.zeros(n), np.ones(k)])
        A_ub = np.block([[R, -np.eye(k)], [-R, -np.eye(k)]])
        b_ub = np.concatenate([r, -r])
        A_eq = np.hstack([E, np.zeros((E.shape[0], k))]) if E.shape[0] else None
        res = linprog(cost, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=e if E.shape[0] else None,
                      bounds=[(None, None)] * n + [(0, None)] * k, method="highs")
        if res.status == 2:
            return None, None, "W(x) empty"
        if res.status != 0:
            raise PipelineError(f"linear program failed at x={x}: {res.message}")
        F_min = float(res.fun)
        xi0 = res.x[:n]
    # minimum-norm point of the near-minimizers, in coordinates x^(l-m) xi / x
    w = _norm_weights(nf, x) / x
    budget = (F_min + x)
    t0 = np.abs(R @ xi0 - r)
    v0 = np.concatenate([w * xi0, t0 + (budget - t0.sum()) / max(k, 1) if k else t0])
    inv = 1.0 / w

    def obj(v):
        return float(v[:n] @ v[:n])

    def grad(v):
        g = np.zeros_like(v)
        g[:n] = 2 * v[:n]
        return g

    cons = []
    if E.shape[0]:
        Ew = E * inv[None, :]
        cons.append({"type": "eq", "fun": lambda v: (Ew @ v[:n] - e) / x,
                     "jac": lambda v: np.hstack([Ew, np.zeros((E.shape[0], k))]) / x})
    if k:
        Rw = R * inv[None, :]
        cons.append({"type": "ineq", "fun": lambda v: np.concatenate([v[n:] - (Rw @ v[:n] - r),
                                                                       v[n:] + (Rw @ v[:n] - r)]) / x,
                     "jac": lambda v: np.vstack([np.hstack([-Rw, np.eye(k)]),
                                                 np.hstack([Rw, np.eye(k)])]) / x})
        cons.append({"type": "ineq", "fun": lambda v: (budget - v[n:].sum()) / x,
                     "jac": lambda v: np.concatenate([np.zeros(n), -np.ones(k)])[None, :] / x})
    bounds = [(None, None)] * n + [(0, None)] * k
    out = minimize(obj, v0, jac=grad, constraints=cons, bounds=bounds, method="SLSQP",
                   options={"ftol": 1e-15, "maxiter": 1000})
    v = out.x if out.success else v0
    xi = v[:n] * inv
    if E.shape[0] and np.abs(E @ xi - e).max() > 1e-9 * (1 + np.abs(e).max()):
        # polish the equality rows by projecting onto W(x)
        corr, *_ = np.linalg.lstsq(E, e - E @ xi, rcond=None)
        xi = xi + corr
    return xi, F_min, None


def fit_puiseux(xs, vals, Nmax=8, Emax=None, tol=1e-6, max_terms=6):
    """Sparse fit sum c_q x^(q/N) over the dictionary {q/N <= Emax}, N <= Nmax,
    by greedy orthogonal least squares.

    By default Emax reaches every exponent whose term can exceed ``tol``
    relative to the leading one on the sampled range.
    Returns (PuiseuxPoly, ok).  Errors are weighted by x^(-e) with e the
    log-log slope of the data at its finest abscissae, so a pure power is
    fitted to relative precision.
    """
    xs = np.asarray(xs, dtype=float)
    v = np.asarray(vals, dtype=float)
    vmax = np.abs(v).max(initial=0.0)
    if vmax == 0.0:
        return PuiseuxPoly(), True
    nz = np.abs(v) > 1e-14 * vmax
    # leading order from the finest abscissae (sign changes further out
    # would bend a global log-log fit)
    fin = np.nonzero(nz)[0][np.argsort(xs[nz])][:4]
    e_lead = float(np.polyfit(np.log(xs[fin]), np.log(np.abs(v[fin])), 1)[0]) if fin.size >= 2 else 0.0
    if Emax is None:
        # every exponent whose term can still exceed tol on the ladder
        xmax = xs.max()
        reach = math.log(tol) / math.log(xmax) if 0 < xmax < 1 else 3.0
        Emax = max(4.0, e_lead + min(reach, 24.0))
    wts = xs ** (-e_lead)
    target = v * wts
    pencil = _pencil_fit(xs, v, wts, Nmax, tol, max_terms)
    if pencil is not None:
        return pencil, True
    best = None
    for N in range(1, Nmax + 1):
        qs = np.arange(0, int(math.floor(Emax * N)) + 1)
        atoms = np.array([xs ** (q / N) * wts for q in qs]).T
        norms = np.linalg.norm(atoms, axis=0)
        sel = []
        resid = target.copy()
        coef = np.zeros(0)
        Q = np.zeros((len(xs), 0))
        for _ in range(max_terms):
            # orthogonal least squares: score atoms after projecting out the
            # span of those already chosen (plain matching pursuit is misled
            # by the strong correlation between neighbouring powers)
            perp = atoms - Q @ (Q.T @ atoms)
            pn = np.linalg.norm(perp, axis=0)
            score = np.where(pn > 1e-10 * norms, np.abs(perp.T @ resid) / np.maximum(pn, 1e-300), -1.0)
            score[sel] = -1
            if score.max() < 0:
                break
            k = int(np.argmax(score))
            sel.append(k)
            q = perp[:, k] / pn[k]
            q = q - Q @ (Q.T @ q)
            Q = np.column_stack([Q, q / np.linalg.norm(q)])
            coef, *_ = np.linalg.lstsq(atoms[:, sel], target, rcond=None)
            resid = target - atoms[:, sel] @ coef
            err = np.abs(resid).max() / np.abs(target).max()
            if best is None or err < best[0]:
                best = (err, N, [int(qs[i]) for i in sel], coef.copy())
            if err <= tol:
                return PuiseuxPoly({int(qs[i]): float(cf) for i, cf in zip(sel, coef)}, N), True
    err, N, qsel, coef = best
    return PuiseuxPoly({q: float(cf) for q, cf in zip(qsel, coef)}, N), False


def _pencil_fit(xs, v, wts, Nmax, tol, max_terms):
    """Exponent recovery on a geometric ladder x_i = x_0 r^i.

    There sum c_k x^(e_k) is a sum of exponentials in i with nodes r^(e_k),
    which a matrix pencil on the Hankel matrix of the samples recovers.
    Exponents are snapped to q/N (N <= Nmax) and the fit is accepted only
    if the weighted residual meets tol.  None otherwise.
    """
    order = np.argsort(xs)[::-1]
    x, y = xs[order], v[order]
    L = x.size
    ratios = x[1:] / x[:-1]
    if L < 4 or not np.allclose(ratios, ratios[0], rtol=1e-10, atol=0.0) or not 0 < ratios[0] < 1:
        return None
    lr = math.log(ratios[0])
    p = L // 2
    H = np.array([y[i:i + p + 1] for i in range(L - p)])
    U, sv, Vt = np.linalg.svd(H, full_matrices=False)
    K = int((sv > 1e-10 * sv[0]).sum())
    if K == 0 or K > max_terms:
        return None
    V = Vt[:K].T
    z = np.linalg.eigvals(np.linalg.pinv(V[:-1]) @ V[1:])
    exps = set()
    for zk in z:
        if abs(zk.imag) > 1e-6 * abs(zk) or zk.real <= 0:
            return None
        e = math.log(zk.real) / lr
        q = Fraction(e).limit_denominator(Nmax)
        if abs(float(q) - e) > 0.02 or q < 0:
            return None
        exps.add(q)
    exps = sorted(exps)
    atoms = np.array([xs ** float(q) * wts for q in exps]).T
    target = v * wts
    coef, *_ = np.linalg.lstsq(atoms, target, rcond=None)
    if np.abs(atoms @ coef - target).max() > tol * np.abs(target).max():
        return None
    return PuiseuxPoly.from_terms([(q, float(c)) for q, c in zip(exps, coef) if c != 0])


def _exponent(xs, vals):
    vals = np.asarray(vals, dtype=float)
    scale = np.abs(vals).max(initial=0.0)
    if scale <= 1e-14:
        return math.inf
    v = np.maximum(np.abs(vals), 1e-14 * scale)
    return float(np.polyfit(np.log(xs), np.log(v), 1)[0])


def _exact_rank(E):
    if not E.shape[0]:
        return 0
    nrm = np.linalg.norm(E, axis=1)
    keep = nrm > 1e-12 * max(nrm.max(), 1e-300)
    if not keep.any():
        return 0
    return int(np.linalg.matrix_rank(E[keep] / nrm[keep, None], tol=1e-9))


def ladder_anomalies(sys):
    """Abscissae where the rank of the exact rows differs from its generic value.

    The generic rank is the most frequent one over the finer half of the
    ladder.  Returns (anomalies, index of the first abscissa past the last one).
    """
    ranks = [_exact_rank(E) for E, _ in sys.exact]
    order = np.argsort(sys.xs)[::-1]
    fine = [ranks[i] for i in order[len(order) // 2:]]
    generic = max(set(fine), key=lambda r: (fine.count(r), -r))
    bad = [int(i) for i in order if ranks[i] != generic]
    out = [{"x": float(sys.xs[i]), "index": i, "rank": ranks[i], "generic_rank": generic} for i in bad]
    start = max((int(np.nonzero(order == i)[0][0]) for i in bad), default=-1) + 1
    return out, start


def solve_selection(sys, fit=True, min_points=8):
    """Per-x linear program, minimum-norm near-minimizer, Puiseux fits.

    Abscissae at or above a rank anomaly of the exact rows are dropped, which
    shrinks the wedge to delta' below the finest anomaly.
    """
    nf = sys.nf
    anomalies, start = ladder_anomalies(sys)
    order = np.argsort(sys.xs)[::-1]
    keep = np.sort(order[start:])
    delta = None
    if anomalies:
        if len(keep) < min_points:
            return SelectionOutcome(sys.xs, np.zeros((0, nf.n_unknowns)), np.zeros(0), math.nan,
                                    exists=False, anomalies=anomalies,
                                    nonexistence={"reason": "too few abscissae below the last rank anomaly",
                                                  "kept": int(len(keep))})
        a = min(x["x"] for x in anomalies if x["x"] > sys.xs[keep].max())
        delta = float(math.sqrt(a * sys.xs[keep].max()))
        sys = TraceConstraintSystem(nf, sys.xs[keep], [sys.exact[i] for i in keep],
                                    [sys.asym[i] for i in keep], [sys.link[i] for i in keep], sys.counts)
    xi = np.zeros((len(sys.xs), nf.n_unknowns))
    F_min = np.zeros(len(sys.xs))
    for i, x in enumerate(sys.xs):
        sol, fm, why = _solve_one(sys, i)
        if sol is None:
            return SelectionOutcome(sys.xs, xi[:i], F_min[:i], math.nan, exists=False,
                                    nonexistence={"x": float(x), "index": i, "reason": why},
                                    anomalies=anomalies, delta=delta)
        # drop solver noise relative to the row's scale in normalized coordinates
        w = _norm_weights(nf, float(x))
        eta = np.abs(w * sol)
        sol = np.where(eta <= 1e-9 * max(eta.max(initial=0.0), float(x)), 0.0, sol)
        xi[i] = sol
        F_min[i] = fm
    expo = _exponent(sys.xs, F_min)
    out = SelectionOutcome(sys.xs, xi, F_min, expo, anomalies=anomalies, delta=delta)
    if not expo > 0.1:
        out.exists = False
        out.nonexistence = {"reason": "F_min does not tend to 0", "exponent": expo,
                            "F_min_finest": float(F_min[-1])}
    if fit:
        fits, ok = [], True
        for col in xi.T:
            p, good = fit_puiseux(sys.xs, col)
            fits.append(p)
            ok &= good
        out.fits = fits
        out.fit_ok = ok
    return out


# ------------------------------------------------------------------- synthesis

def _taylor_piece(nf, fits, s, j, tag):
    psi = nf.psi[s]
    coefs = [fits[nf.index(s, j, a)] for a in range(nf.m + 1)]

    def f(X, Y):
        H = Y - psi.on_jets(X)
        out = X * 0.0
        power = X * 0.0 + 1.0
        for a, c in enumerate(coefs):
            out = out + c.on_jets(X) * power * (1.0 / math.factorial(a))
            power = power * H
        return out
    return FieldPiece(f, tag, nf.ladder.delta, name=f"T{s},{j}")


@dataclass
class SectionResult:
    components: list
    wedge_components: list
    cm_reports: list
    verification: object
    delta: float
    strips: dict = field(default_factory=dict)

    @property
    def ok(self):
        return self.verification.ok and all(r.ok for r in self.cm_reports)


def synthesize_section(nf, sel, profile=None, tol=1e-6, extend=True):
    """Build the field from the fitted traces and certify it."""
    if not sel.exists:
        raise PipelineError(f"no section: {sel.nonexistence}")
    if sel.fits is None:
        raise PipelineError("selection carries no Puiseux fits")
    m, D = nf.m, nf.D
    profile = profile or make_cutoff(2 * (m + 1), m)
    delta = nf.validate()
    if sel.delta is not None:
        delta = min(delta, sel.delta)
    fits = sel.fits
    strip_fields = {}
    for s in range(1, nf.smax + 1):
        st = nf.strip(s)
        region = CuspRegion(nf.psi[s - 1], nf.psi[s], delta)
        indep = {}
        for j in st.perm[st.k:]:
            Fp = _taylor_piece(nf, fits, s, j, "+")
            Fm = _taylor_piece(nf, fits, s - 1, j, "-")
            try:
                indep[j] = patch_cusp(Fp, Fm, region, profile, m)
            except PatchError as exc:
                raise PipelineError(f"strip {s}, component {j}: {exc}") from exc
        comps = dict(indep)
        for i in range(st.k):
            comps[st.perm[i]] = _dependent(st, i, indep)
        strip_fields[s] = comps
    wedge = [_glue(nf, strip_fields, j, delta) for j in range(D)]
    comps = [wedge_extend(F, m, profile, check_origin=False) for F in wedge] if extend else wedge
    reports = [cm_verify(F, m) for F in comps]
    ver = verify_section(nf, wedge, xs=default_ladder(delta), tol=tol)
    return SectionResult(comps, wedge, reports, ver, delta, strip_fields)


def _dependent(st, i, indep):
    order = st.perm[st.k:]

    def g(X, Y):
        A = st.A(X, Y) if st.A is not None else None
        phi = st.phi(X, Y) if st.phi is not None else None
        out = X * 0.0
        if phi is not None:
            out = out + phi[i]
        if A is not None:
            for jj, comp in enumerate(order):
                out = out - A[i][jj] * indep[comp].func(X, Y)
        return out
    return FieldPiece(g, "dep", name=f"G{i}")


def _glue(nf, strip_fields, j, delta):
    psis = nf.psi

    def f(X, Y):
        x, y = X.value, Y.value
        out = JetArray(X.space, np.zeros_like(X.c))
        done = np.zeros(x.shape, dtype=bool)
        pos = x > 0
        for s in range(1, nf.smax + 1):
            if s == nf.smax:
                mask = pos & ~done
            else:
                hi = np.where(pos, psis[s].evaluate(np.where(pos, x, 1.0)), 0.0)
                mask = pos & ~done & (y <= hi)
            if mask.any():
                out.c[:, mask] = strip_fields[s][j].func(X.take(mask), Y.take(mask)).c
                done |= mask
        return out

    def heights(x):
        x = np.asarray(x, dtype=float)
        cols = []
        for s in range(1, nf.smax + 1):
            lo, hi = psis[s - 1].evaluate(x), psis[s].evaluate(x)
            cols += [lo + t * (hi - lo) for t in (0.2, 0.4, 0.5, 0.6, 0.8)]
        return np.stack(cols, axis=-1)

    def length_scale(x):
        x = np.asarray(x, dtype=float)
        widths = [psis[s].evaluate(x) - psis[s - 1].evaluate(x) for s in range(1, nf.smax + 1)]
        return np.min(widths, axis=0)

    return FieldPiece(f, "wedge", delta, heights, length_scale, name=f"F{j}")


# ---------------------------------------------------------------- verification

@dataclass
class VerificationReport:
    ok: bool
    worst: float
    residuals: dict
    failures: list = field(default_factory=list)


def traces_of(nf, components, x):
    """xi^s_jl(x) = d_y^l F_j(x, psi_s(x)) for a candidate field."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.zeros((x.size, nf.n_unknowns))
    for s in range(nf.smax + 1):
        ys = nf.psi[s].evaluate(x) if not nf.psi[s].is_zero() else np.zeros_like(x)
        for j, F in enumerate(components):
            Dd = F.derivatives(x, ys, nf.m)
            for l in range(nf.m + 1):
                out[:, nf.index(s, j, l)] = Dd[(0, l)]
    return out


def verify_section(target, components, xs=None, tol=1e-6):
    """Residuals of strip, curve and origin conditions (normal form input) or
    fiber distances (sampled bundle input)."""
    if isinstance(target, SampledBundle):
        return _verify_bundle(target, components, tol)
    nf = target
    delta = nf.validate()
    xs = default_ladder(delta) if xs is None else np.asarray(xs, dtype=float)
    rep = VerificationReport(True, 0.0, {})
    T = traces_of(nf, components, xs)
    worst_curve = 0.0
    for s in range(nf.smax + 1):
        for r, cr in enumerate(nf.curves.get(s, [])):
            val = np.zeros(len(xs))
            for (j, l), th in cr.theta.items():
                val += th.evaluate(xs) * T[:, nf.index(s, j, l)]
            res = np.abs(val - cr.g.evaluate(xs))
            k = int(np.argmax(res))
            worst_curve = max(worst_curve, float(res[k]))
            if res[k] > tol:
                rep.failures.append({"kind": "curve", "curve": s, "row": r, "x": float(xs[k]),
                                     "residual": float(res[k])})
    rep.residuals["curve"] = worst_curve
    worst_strip = 0.0
    for s, st in nf.strips.items():
        if st.k == 0:
            continue
        lo, hi = nf.psi[s - 1].evaluate(xs), nf.psi[s].evaluate(xs)
        for tau in (0.25, 0.5, 0.75):
            ys = lo + tau * (hi - lo)
            sp = JetSpace(2, 0)
            X = JetArray.variable(sp, xs, 0)
            Y = JetArray.variable(sp, ys, 1)
            A = st.A(X, Y) if st.A is not None else None
            phi = st.phi(X, Y) if st.phi is not None else None
            vals = [F(xs, ys) for F in components]
            for i in range(st.k):
                lhs = vals[st.perm[i]].copy()
                if A is not None:
                    for jj, comp in enumerate(st.perm[st.k:]):
                        lhs += _as_jet(A[i][jj], sp, len(xs)).value * vals[comp]
                rhs = _as_jet(phi[i], sp, len(xs)).value if phi is not None else 0.0
                res = np.abs(lhs - rhs)
                k = int(np.argmax(res))
                worst_strip = max(worst_strip, float(res[k]))
                if res[k] > tol:
                    rep.failures.append({"kind": "strip", "strip": s, "row": i, "x": float(xs[k]),
                                         "residual": float(res[k])})
    rep.residuals["strip"] = worst_strip
    origin_ok = all(_origin_jet_zero(F, nf.m) for F in components) if nf.origin_zero else True
    rep.residuals["origin"] = 0.0 if origin_ok else math.inf
    if not origin_ok:
        rep.failures.append({"kind": "origin", "residual": math.inf})
    rep.worst = max(worst_curve, worst_strip, rep.residuals["origin"])
    rep.ok = not rep.failures
    return rep


def _verify_bundle(b, components, tol):
    space = b.space
    rep = VerificationReport(True, 0.0, {})
    d = np.zeros(len(b.points))
    for k, (pt, f) in enumerate(zip(b.points, b.fibers)):
        vec = []
        for F in components:
            J = F.jets(np.array([pt[0]]), np.array([pt[1]]), space.m)
            vec.append(J.c[:, 0])
        d[k] = f.distance(np.concatenate(vec))
    rep.residuals["fiber"] = float(d.max(initial=0.0))
    rep.worst = rep.residuals["fiber"]
    bad = np.nonzero(d > tol)[0]
    for k in bad[:10]:
        rep.failures.append({"kind": "fiber", "point": b.points[k].tolist(), "residual": float(d[k])})
    rep.ok = bad.size == 0
    return rep


def certify_strip_bounds(nf, xs=None, taus=(1e-3, 1e-2, 0.1, 0.5, 0.9, 0.99, 0.999)):
    """Estimate C with |d^alpha A|, |d^alpha phi| <= C dist^(-|alpha|),
    dist the distance to the nearer boundary curve of the strip."""
    delta = nf.validate()
    xs = default_ladder(delta, 8, 0.5) if xs is None else np.asarray(xs, dtype=float)
    m = nf.m
    out = {}
    for s, st in nf.strips.items():
        if st.k == 0:
            continue
        lo, hi = nf.psi[s - 1].evaluate(xs), nf.psi[s].evaluate(xs)
        X0 = np.repeat(xs, len(taus))
        Y0 = (lo[:, None] + np.array(taus)[None, :] * (hi - lo)[:, None]).ravel()
        dist = np.minimum(np.abs(Y0 - np.repeat(lo, len(taus))), np.abs(np.repeat(hi, len(taus)) - Y0))
        sp = JetSpace(2, m)
        X = JetArray.variable(sp, X0, 0)
        Y = JetArray.variable(sp, Y0, 1)
        vals = []
        if st.A is not None:
            vals += [_as_jet(v, sp, X0.size) for row in st.A(X, Y) for v in row]
        if st.phi is not None:
            vals += [_as_jet(v, sp, X0.size) for v in st.phi(X, Y)]
        C = 0.0
        for V in vals:
            for a in sp.indices:
                C = max(C, float(np.max(np.abs(V.partial(a)) * dist ** sum(a))))
        out[s] = C
    return {"constants": out, "ok": all(np.isfinite(c) for c in out.values())}


# ------------------------------------------------------------ normal form helper

def strip_system_from_equations(C, g, D, samples):
    """Strip system for pointwise equations sum_j C_rj(x, y) F_j = g_r(x, y).

    The pivot pattern comes from parametric elimination on the sample
    points (largest piece wins); the coefficients A, phi are then produced
    by elimination with that fixed pattern on jet carriers.
    """
    samples = [tuple(p) for p in samples]
    N = len(g(*[JetArray.const(JetSpace(2, 0), v, 1) for v in samples[0]]))
    sp0 = JetSpace(2, 0)

    def val(fn, p):
        X, Y = (JetArray.const(sp0, p[0], 1), JetArray.const(sp0, p[1], 1))
        out = fn(X, Y)
        return np.array([[_as_jet(v, sp0, 1).value[0] for v in row] for row in out]) \
            if isinstance(out[0], (list, tuple)) else np.array([_as_jet(v, sp0, 1).value[0] for v in out])

    sys = ParamLinearSystem(N, D, lambda p: val(C, p), lambda p: val(g, p))
    pieces = eliminate(sys, samples)
    piece = max(pieces, key=lambda p: len(p.points))
    k = piece.k
    pivots = list(piece.pivots)
    perm = tuple(piece.perm)

    def reduce(X, Y):
        sp = X.space
        P = X.npts
        M = [[_as_jet(v, sp, P) for v in row] for row in C(X, Y)]
        rhs = [_as_jet(v, sp, P) for v in g(X, Y)]
        for r, c in pivots:
            piv = M[r][c]
            M[r] = [v / piv for v in M[r]]
            rhs[r] = rhs[r] / piv
            for rr in range(N):
                if rr == r:
                    continue
                f = M[rr][c]
                M[rr] = [a - f * b for a, b in zip(M[rr], M[r])]
                rhs[rr] = rhs[rr] - f * rhs[r]
        return M, rhs

    def A(X, Y):
        M, _ = reduce(X, Y)
        return [[M[r][j] for j in perm[k:]] for r, _ in pivots]

    def phi(X, Y):
        _, rhs = reduce(X, Y)
        return [rhs[r] for r, _ in pivots]

    return StripSystem(k, perm, A, phi)


# -------------------------------------------------------------------- fixtures

def _curve_ladder(*curves):
    return CurveLadder(list(curves), 1.0)


def xy_fixture():
    """D = 1, m = 1, curves 0 < x/2 < x, one curve row F(x, x/2) = x^2/2."""
    half = PuiseuxPoly({1: Fraction(1, 2)})
    lad = _curve_ladder(PuiseuxPoly(), half, PuiseuxPoly({1: 1}))
    row = CurveRow({(0, 0): PuiseuxPoly({0: 1})}, PuiseuxPoly({2: Fraction(1, 2)}))
    return WedgeNormalForm(lad, 1, 1, {}, {1: [row]})


def slope_fixture():
    """d_y F(x, x/2) = 1: incompatible with a flat jet at the origin."""
    nf = xy_fixture()
    nf.curves = {1: [CurveRow({(0, 1): PuiseuxPoly({0: 1})}, PuiseuxPoly({0: 1}))]}
    return nf


def run_pipeline(nf, xs=None, tol=1e-6, extend=True):
    """Assemble, select and synthesize; returns (selection, section or None)."""
    sys = assemble_constraints(nf, xs=xs)
    sel = solve_selection(sys)
    if not sel.exists:
        return sys, sel, None
    return sys, sel, synthesize_section(nf, sel, tol=tol, extend=extend)
