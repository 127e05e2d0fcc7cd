"""Cusp patching with a smooth partition of unity, wedge extension and C^m checks.

Fields on the plane are ``FieldPiece`` objects wrapping a function of two
``JetArray`` carriers (x, y).  All partial derivatives are obtained by
Taylor-mode evaluation, so every check below runs on exact jets of the
supplied formulas.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .jetcore import JetArray, JetSpace, multi_indices
from .puiseux import PuiseuxPoly, leading_coefficient

ONE_THIRD = 1.0 / 3.0
TWO_THIRDS = 2.0 / 3.0


class PatchError(ValueError):
    pass


def smoothstep_coefficients(r):
    """Exact coefficients (ascending) of the degree 2r+1 polynomial S with
    S(0)=0, S(1)=1 and S^(j)(0) = S^(j)(1) = 0 for 1 <= j <= r."""
    c = [Fraction(0)] * (2 * r + 2)
    for n in range(r + 1):
        c[r + 1 + n] += Fraction((-1) ** n * math.comb(r + n, n) * math.comb(2 * r + 1, r - n))
    return c


@dataclass
class CutoffProfile:
    """theta = 1 on t <= 1/3, 0 on t >= 2/3, 1 - S(3t - 1) in between."""

    r: int
    coeffs: list
    bounds: list = field(default_factory=list)

    def __post_init__(self):
        self._polys = []
        p = np.polynomial.Polynomial([float(c) for c in self.coeffs])
        for k in range(self.r + 2):
            self._polys.append(p)
            p = p.deriv()

    def derivative(self, t, k=0):
        """k-th derivative of theta at t (arrays welcome)."""
        t = np.asarray(t, dtype=float)
        mid = (t > ONE_THIRD) & (t < TWO_THIRDS)
        if k == 0:
            out = np.where(t <= ONE_THIRD, 1.0, 0.0)
        else:
            out = np.zeros_like(t)
        if k < len(self._polys):
            # S(u) = 1 - S(1 - u): evaluate only on u <= 1/2 to avoid cancellation
            u = 3.0 * t - 1.0
            flip = u > 0.5
            s = self._polys[k](np.where(flip, 1.0 - u, u))
            if k == 0:
                vals = np.where(flip, s, 1.0 - s)
            else:
                vals = -(3.0 ** k) * np.where(flip, (-1) ** (k + 1) * s, s)
            out = np.where(mid, vals, out)
        return out

    def __call__(self, t):
        return self.derivative(t, 0)

    def on_jets(self, T):
        m = T.space.m
        return T.compose([self.derivative(T.value, k) for k in range(m + 1)])


def make_cutoff(r, m=None):
    """Cutoff of smoothness C^r; ``m`` (if given) enforces r >= m + 1."""
    if r < 1 or (m is not None and r < m + 1):
        raise PatchError(f"cutoff smoothness r={r} too small for m={m}")
    prof = CutoffProfile(r, smoothstep_coefficients(r))
    bounds = []
    for k in range(r + 1):
        # extremes of theta^(k) on [1/3, 2/3]: endpoints and critical points
        q = prof._polys[k + 1]
        crit = [x.real for x in q.roots() if abs(x.imag) < 1e-9 and 0 <= x.real <= 1] if q.degree() > 0 else []
        us = np.array([0.0, 1.0] + crit)
        v = np.abs(prof._polys[k](us)) * 3.0 ** k
        bounds.append(float(v.max()))
    prof.bounds = bounds
    return prof


@dataclass
class CuspRegion:
    psi_minus: PuiseuxPoly
    psi_plus: PuiseuxPoly
    delta: float = 1.0

    def width(self, x):
        return self.psi_plus.evaluate(x) - self.psi_minus.evaluate(x)

    def validate(self, samples=2000):
        """Largest delta' <= delta with 0 <= psi_- < psi_+ <= x on (0, delta']."""
        d = self.psi_plus - self.psi_minus
        if d.is_zero() or float(leading_coefficient(d)) <= 0:
            return 0.0
        xs = np.unique(np.concatenate([self.delta * np.logspace(-8, 0, samples // 2),
                                       np.linspace(self.delta / samples, self.delta, samples // 2)]))
        lo = self.psi_minus.evaluate(xs)
        hi = self.psi_plus.evaluate(xs)
        bad = (lo < -1e-15 * xs) | (hi <= lo) | (hi > xs * (1 + 1e-12))
        if not bad.any():
            return float(self.delta)
        i = int(np.argmax(bad))
        return float(xs[i - 1]) if i > 0 else 0.0


def _coord_space(m):
    return JetSpace(2, m)


class FieldPiece:
    """A field on (part of) the plane given by a formula on jet carriers.

    ``func(X, Y)`` receives ``JetArray`` values and returns a ``JetArray``.
    ``heights(x)`` optionally lists extra probe heights (shape (k,) per x)
    and ``length_scale(x)`` the smallest feature size near abscissa x.
    """

    def __init__(self, func, tag="+", delta=1.0, heights=None, length_scale=None, name=None):
        self.func = func
        self.tag = tag
        self.delta = float(delta)
        self.heights = heights
        self.length_scale = length_scale
        self.name = name or getattr(func, "__name__", "field")

    @classmethod
    def zero(cls, tag="+"):
        return cls(lambda X, Y: X * 0.0, tag, name="0")

    def jets(self, xs, ys, m):
        xs = np.atleast_1d(np.asarray(xs, dtype=float))
        ys = np.atleast_1d(np.asarray(ys, dtype=float))
        xs, ys = np.broadcast_arrays(xs, ys)
        sp = _coord_space(m)
        X = JetArray.variable(sp, xs.ravel(), 0)
        Y = JetArray.variable(sp, ys.ravel(), 1)
        out = self.func(X, Y)
        if not isinstance(out, JetArray):
            out = JetArray.const(sp, out, xs.size)
        return out

    def derivatives(self, xs, ys, m):
        J = self.jets(xs, ys, m)
        return {a: J.partial(a) for a in multi_indices(2, m)}

    def derivative(self, xs, ys, alpha):
        return self.jets(xs, ys, sum(alpha)).partial(alpha)

    def __call__(self, xs, ys):
        return self.jets(xs, ys, 0).value


def _masked(X, mask, fn):
    """Apply fn on the points selected by mask; zero jets elsewhere."""
    out = JetArray(X.space, np.zeros_like(X.c))
    if mask.any():
        sub = fn(mask)
        out.c[:, mask] = sub.c
    return out


def _ladder(delta, count=8, ratio=0.5):
    return 0.5 * delta * ratio ** np.arange(count)


def _fit(scale, vals, floor):
    vals = np.asarray(vals, dtype=float)
    if np.all(vals <= floor):
        return math.inf
    v = np.maximum(vals, np.maximum(floor, 1e-300))
    return float(np.polyfit(np.log(scale), np.log(v), 1)[0])


@dataclass
class CompatibilityReport:
    ok: bool
    exponents: dict
    residuals: dict
    failing: list = field(default_factory=list)


def compatibility_check(Fp, Fm, region, m, xs=None, margin=0.1):
    """Decay of the Taylor mismatch between F+ on psi_+ and F- on psi_-.

    For each l <= m the residual
        d_y^l F+(x, psi_+) - sum_{j <= m-l} d_y^(l+j) F-(x, psi_-) w^j / j!,
    w = psi_+ - psi_-, must vanish faster than w^(m-l).
    """
    xs = _ladder(region.delta) if xs is None else np.asarray(xs, dtype=float)
    lo = region.psi_minus.evaluate(xs)
    hi = region.psi_plus.evaluate(xs)
    w = hi - lo
    Dp = Fp.derivatives(xs, hi, m)
    Dm = Fm.derivatives(xs, lo, m)
    exps, res, failing = {}, {}, []
    for l in range(m + 1):
        terms = [Dp[(0, l)]]
        acc = Dp[(0, l)].copy()
        for j in range(m - l + 1):
            t = Dm[(0, l + j)] * w ** j / math.factorial(j)
            terms.append(t)
            acc = acc - t
        scale = np.max(np.abs(terms), axis=0)
        r = np.abs(acc)
        e = _fit(w, r, 1e-12 * scale)
        exps[l] = e
        res[l] = r
        if not e > m - l + margin:
            failing.append(l)
    return CompatibilityReport(not failing, exps, res, failing)


def patch_cusp(Fp, Fm, region, profile, m, force=False):
    """Blend F+ (above the strip) and F- (below it) across psi_- <= y <= psi_+.

    theta_- = theta((y - psi_-)/(psi_+ - psi_-)), theta_+ = 1 - theta_-.
    On the plateaus the result is F+ or F- exactly.  Refuses to patch an
    incompatible pair unless ``force`` is set.
    """
    if profile.r < m + 1:
        raise PatchError("cutoff smoothness below m + 1")
    rep = compatibility_check(Fp, Fm, region, m)
    if not rep.ok and not force:
        raise PatchError(f"pieces are not compatible at l={rep.failing}")
    delta = region.validate()
    if delta <= 0:
        raise PatchError("curves are not ordered near 0")
    lo_c, hi_c = region.psi_minus, region.psi_plus

    def blended(X, Y):
        def inner(mask):
            Xs, Ys = X.take(mask), Y.take(mask)
            lo = lo_c.on_jets(Xs)
            hi = hi_c.on_jets(Xs)
            T = (Ys - lo) / (hi - lo)
            th_m = profile.on_jets(T)
            # theta_+ + theta_- == 1 bit for bit: keep the larger of the two as 1 - other
            th_p = 1.0 - th_m
            big = th_p.value >= 0.5
            th_m.c[0] = np.where(big, 1.0 - th_p.value, th_m.value)
            th_p.c[0] = np.where(big, th_p.value, 1.0 - th_m.value)
            Gp = Fp.func(Xs, Ys)
            Gm = Fm.func(Xs, Ys)
            out = Gp * th_p + Gm * th_m
            t = T.value
            out = Gp.where(t >= TWO_THIRDS, out)
            return Gm.where(t <= ONE_THIRD, out)
        return _masked(X, X.value > 0, inner)

    def heights(x):
        lo = lo_c.evaluate(x)
        hi = hi_c.evaluate(x)
        return np.stack([lo + s * (hi - lo) for s in (0.0, 0.2, 0.4, 0.5, 0.6, 0.8, 1.0)], axis=-1)

    out = FieldPiece(blended, "patched", delta, heights, region.width, name="patch")
    out.region = region
    out.profile = profile
    out.compatibility = rep
    return out


def partition_of_unity(region, profile, xs, ys, m=0):
    """Jets of (theta_+, theta_-) as the patch computes them."""
    one = FieldPiece(lambda X, Y: X * 0.0 + 1.0)
    zero = FieldPiece.zero()
    th_p = patch_cusp(one, zero, region, profile, m=min(m, profile.r - 1), force=True)
    th_m = patch_cusp(zero, one, region, profile, m=min(m, profile.r - 1), force=True)
    return th_p.jets(xs, ys, m), th_m.jets(xs, ys, m)


def _lift(J, big):
    """Embed a jet over n variables into a space with one extra variable."""
    c = np.zeros((big.dim, J.npts))
    for a in J.space.indices:
        c[big.position(a + (0,))] = J.c[J.space.position(a)]
    return JetArray(big, c)


def _slice(J, small, j):
    """Coefficient of t^j as a jet over the original variables."""
    c = np.zeros((small.dim, J.npts))
    for a in small.indices:
        c[small.position(a)] = J.c[J.space.position(a + (j,))]
    return JetArray(small, c)


def _taylor_in_y(F, X, Y, anchor, m):
    """sum_{j<=m} d_y^j F(x, anchor(x)) (Y - anchor)^j / j! on jet carriers."""
    small = X.space
    big = JetSpace(small.n + 1, small.m + m)
    Xb = _lift(X, big)
    T = JetArray.variable(big, np.zeros(X.npts), small.n)
    A = anchor(Xb)
    G = F.func(Xb, A + T)
    base = anchor(X)
    out = JetArray(small, np.zeros_like(X.c))
    H = Y - base
    power = JetArray.const(small, 1.0, X.npts)
    for j in range(m + 1):
        out = out + _slice(G, small, j) * power
        power = power * H
    return out


def _origin_jet_zero(F, m, tol=1e-12):
    with np.errstate(all="ignore"):
        try:
            J = F.jets(np.array([0.0]), np.array([0.0]), m)
            vals = J.c[:, 0]
        except (ZeroDivisionError, FloatingPointError, ValueError):
            vals = np.array([np.nan])
    if np.all(np.isfinite(vals)):
        return bool(np.all(np.abs(vals) <= tol))
    # singular formula at the origin: fall back to decay along a short ladder
    xs = 1e-3 * 0.5 ** np.arange(6)
    D = F.derivatives(xs, 0.5 * xs, m)
    for a, v in D.items():
        if _fit(xs, np.abs(v), 1e-300) <= sum(a) - m + 1e-9 and np.abs(v).max() > tol:
            return False
    return True


def wedge_extend(F, m, profile=None, check_origin=True):
    """Extend a field on {0 <= y <= x} to a neighbourhood of the origin.

    Below the wedge F is replaced by its Taylor polynomial in y about y = 0,
    above it by the Taylor polynomial about y = x; the glued field is cut
    off by theta_w(y/x), equal to 1 on [0, 1] and supported in [-1, 2].
    The extension vanishes for x <= 0.
    """
    profile = profile or make_cutoff(2 * (m + 1), m)
    if check_origin and not _origin_jet_zero(F, m):
        raise PatchError("field has a nonzero jet at the origin; subtract it first")

    def ext(X, Y):
        def inner(mask):
            Xs, Ys = X.take(mask), Y.take(mask)
            r = Ys.value / Xs.value
            below, above = r < 0, r > 1
            inside = ~(below | above)
            out = JetArray(Xs.space, np.zeros_like(Xs.c))
            if inside.any():
                out.c[:, inside] = F.func(Xs.take(inside), Ys.take(inside)).c
            if below.any():
                Xb, Yb = Xs.take(below), Ys.take(below)
                out.c[:, below] = _taylor_in_y(F, Xb, Yb, lambda Z: Z * 0.0, m).c
            if above.any():
                Xa, Ya = Xs.take(above), Ys.take(above)
                out.c[:, above] = _taylor_in_y(F, Xa, Ya, lambda Z: Z, m).c
            R = Ys / Xs
            u = R.value
            W = JetArray.const(Xs.space, 1.0, Xs.npts)
            neg, pos = u < 0, u > 1
            if neg.any():
                W.c[:, neg] = profile.on_jets(-R.take(neg)).c
            if pos.any():
                W.c[:, pos] = profile.on_jets(R.take(pos) - 1.0).c
            return out * W
        return _masked(X, X.value > 0, inner)

    def heights(x):
        x = np.asarray(x, dtype=float)
        return np.stack([x * s for s in (-0.8, -0.5, -0.2, 1.2, 1.5, 1.8)], axis=-1)

    def length_scale(x):
        # the cutoff layer is x/3 wide and its profile is steep
        x = np.asarray(x, dtype=float)
        ls = 0.1 * np.abs(x)
        return ls if F.length_scale is None else np.minimum(ls, F.length_scale(x))

    out = FieldPiece(ext, "extended", F.delta, heights, length_scale, name=f"ext({F.name})")
    out.inner = F
    return out


@dataclass
class CmReport:
    ok: bool
    exponents: dict
    failures: list = field(default_factory=list)

    def witness(self):
        return self.failures[0] if self.failures else None


DEFAULT_FRACTIONS = (0.0, 1e-3, 1e-2, 0.1, 0.25, 0.5, 0.75, 1.0)
INTERIOR_FRACTIONS = (0.1, 0.3, 0.5, 0.7, 0.9)
STENCIL = np.array([1.0, -8.0, 8.0, -1.0]) / 12.0
OFFSETS = np.array([-2.0, -1.0, 1.0, 2.0])
STEP_MULTIPLIERS = (1.0, 4.0, 16.0, 64.0)
JET_FLOOR = 1e-9
NUDGES = (((1.0, 0.37), 1.0), ((-0.61, 1.0), 1.0), ((1.0, 0.37), 2.9))


def probe_heights(F, xs, fractions=DEFAULT_FRACTIONS):
    xs = np.asarray(xs, dtype=float)
    ys = [xs[:, None] * np.array(fractions)[None, :]]
    if F.heights is not None:
        ys.append(np.asarray(F.heights(xs), dtype=float).reshape(len(xs), -1))
    return np.concatenate(ys, axis=1)


def cm_verify(F, m, samples=None, xs=None, margin=0.1, rel_tol=1e-4, step=1e-3):
    """Certify flatness at the origin and consistency of the partials.

    (a) for every |alpha| <= m the log-log slope of max |d^alpha F| over the
        probe heights at each ladder abscissa must exceed m - |alpha| + margin;
    (b) at interior samples every d^alpha F with 1 <= |alpha| <= m agrees
        with the fourth-order central difference of a lower partial at one
        of the steps h * STEP_MULTIPLIERS, h = step * min(x, local length scale).
    """
    xs = _ladder(F.delta) if xs is None else np.asarray(xs, dtype=float)
    report = CmReport(True, {})
    H = probe_heights(F, xs)
    Xg = np.repeat(xs[:, None], H.shape[1], axis=1)
    D = F.derivatives(Xg.ravel(), H.ravel(), m)
    scales = {}
    for a, v in D.items():
        v = np.abs(v.reshape(H.shape))
        if not np.all(np.isfinite(v)):
            report.ok = False
            report.failures.append({"check": "flatness", "alpha": a, "reason": "non-finite derivative"})
            continue
        sup = v.max(axis=1)
        scales[a] = sup
        e = _fit(xs, sup, 0.0)
        report.exponents[a] = e
        if not e > m - sum(a) + margin:
            k = int(np.argmax(v[-1]))
            report.ok = False
            report.failures.append({"check": "flatness", "alpha": a, "exponent": e,
                                    "point": (float(xs[-1]), float(H[-1, k]))})
    if samples is None:
        sx = xs[::2]
        ys = probe_heights(F, sx, INTERIOR_FRACTIONS)
        if F.heights is not None:
            # skip seams: only strictly interior extra heights
            ys = np.concatenate([sx[:, None] * np.array(INTERIOR_FRACTIONS)[None, :],
                                 _midpoints(F.heights(sx))], axis=1)
        samples = np.stack([np.repeat(sx, ys.shape[1]), ys.ravel()], axis=1)
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    px, py = samples[:, 0], samples[:, 1]
    h = step * np.abs(px)
    if F.length_scale is not None:
        h = np.minimum(h, step * np.abs(np.asarray(F.length_scale(px), dtype=float)))
    Dc = F.derivatives(px, py, m)
    # size of the whole jet at the local length scale L: partials of order
    # |alpha| below JET_FLOOR * S / L^|alpha| are beyond what doubles resolve
    L = h / step
    with np.errstate(over="ignore", invalid="ignore"):
        S = np.max([np.abs(v) * L ** sum(a) for a, v in Dc.items()], axis=0)
    # several step sizes: truncation error grows like h^4 and rounding noise
    # like 1/h, while a genuine inconsistency does not depend on h at all
    shifted = {}
    for mult in STEP_MULTIPLIERS:
        for i in range(2):
            for s in OFFSETS:
                qx = px + (s * mult * h if i == 0 else 0.0)
                qy = py + (s * mult * h if i == 1 else 0.0)
                shifted[(mult, i, s)] = F.derivatives(qx, qy, m - 1) if m >= 1 else {}
    # rounding noise of each lower partial: second differences over a nudge
    # much shorter than h, whose true part (order nudge^2) is negligible
    spread = {}
    if m >= 1:
        for (dx, dy), k in NUDGES:
            eta = k * 1e-3 * h
            lo = F.derivatives(px - dx * eta, py - dy * eta, m - 1)
            hi = F.derivatives(px + dx * eta, py + dy * eta, m - 1)
            for b in lo:
                sd = np.abs(lo[b] + hi[b] - 2 * Dc[b])
                spread[b] = sd if b not in spread else np.maximum(spread[b], sd)
    for a in Dc:
        if sum(a) == 0:
            continue
        for i in range(2):
            if a[i] == 0:
                continue
            b = list(a)
            b[i] -= 1
            b = tuple(b)
            exact = Dc[a]
            sc = _scale_at(scales.get(a), xs, px)
            ratio = np.full(exact.shape, np.inf)
            err = np.full(exact.shape, np.inf)
            for mult in STEP_MULTIPLIERS:
                vals = [shifted[(mult, i, s)][b] for s in OFFSETS]
                fd = sum(c * v for c, v in zip(STENCIL, vals)) / (mult * h)
                e = np.abs(fd - exact)
                # rounding noise of the stencil itself
                noise = np.maximum(64 * np.finfo(float).eps * np.max(np.abs(vals), axis=0),
                                   4 * spread[b]) / (mult * h) + JET_FLOOR * S / L ** sum(a)
                bound = rel_tol * np.maximum(np.abs(exact), 1e-3 * sc) + noise
                with np.errstate(divide="ignore", invalid="ignore"):
                    r = np.where(e <= bound, 0.0, e / np.maximum(bound, 1e-300))
                better = r < ratio
                ratio = np.where(better, r, ratio)
                err = np.where(better, e, err)
            bad = np.nonzero(~(ratio <= 1.0))[0]
            if bad.size:
                k = int(bad[np.argmax(ratio[bad])])
                report.ok = False
                report.failures.append({"check": "difference", "alpha": a, "direction": i,
                                        "point": (float(px[k]), float(py[k])),
                                        "error": float(err[k]), "value": float(exact[k])})
                break
    return report


def certified_delta(F, m, count=12, ratio=0.5, min_points=4, **kw):
    """Largest delta' on the ladder such that cm_verify passes on (0, delta'].

    The ladder is 0.5 F.delta ratio^k; dropping its coarsest abscissae one at
    a time, the first passing tail x_k, x_k+1, ... gives delta' = x_k (F.delta
    when the whole ladder passes).  Returns (delta', report); delta' = 0 if no tail with
    at least min_points abscissae passes.
    """
    xs = _ladder(F.delta, count, ratio)
    rep = None
    for k in range(len(xs) - min_points + 1):
        rep = cm_verify(F, m, xs=xs[k:], **kw)
        if rep.ok:
            return (F.delta if k == 0 else float(xs[k])), rep
    return 0.0, rep


def _midpoints(H):
    H = np.sort(np.asarray(H, dtype=float), axis=-1)
    return 0.5 * (H[..., 1:] + H[..., :-1])


def _scale_at(sup, xs, px):
    if sup is None:
        return np.zeros_like(px)
    # magnitude of the partial at the nearest ladder abscissa
    idx = np.abs(np.log(np.maximum(px, 1e-300))[:, None] - np.log(xs)[None, :]).argmin(axis=1)
    return sup[idx]
