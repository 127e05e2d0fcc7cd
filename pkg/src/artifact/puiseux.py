"""Truncated Puiseux series sum_q c_q x^(q/N) and the curve ladders built from them."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np


class PuiseuxError(ValueError):
    pass


def _coef(c):
    if isinstance(c, (Fraction, int)):
        return Fraction(c)
    return float(c)


class PuiseuxPoly:
    """Finite Puiseux series with ramification N.

    ``coeffs`` maps integer numerators q to coefficients of x^(q/N).
    ``trunc`` is the largest numerator known to be exact; terms with larger
    exponents are unknown.  ``trunc=None`` means the series is exact (a
    finite sum with no remainder).
    """

    __slots__ = ("N", "coeffs", "trunc")

    def __init__(self, coeffs=None, N=1, trunc=None):
        if N < 1 or int(N) != N:
            raise PuiseuxError(f"ramification must be a positive integer, got {N}")
        coeffs = {int(q): _coef(c) for q, c in (coeffs or {}).items()}
        if trunc is not None:
            coeffs = {q: c for q, c in coeffs.items() if q <= trunc}
        coeffs = {q: c for q, c in coeffs.items() if c != 0}
        # canonical form: smallest N that keeps integer numerators
        g = N
        for q in coeffs:
            g = math.gcd(g, q)
        if trunc is not None:
            g = math.gcd(g, trunc)
        g = max(g, 1)
        self.N = N // g
        self.coeffs = {q // g: c for q, c in sorted(coeffs.items())}
        self.trunc = None if trunc is None else trunc // g

    @classmethod
    def monomial(cls, c, p):
        p = Fraction(p)
        return cls({p.numerator: c}, p.denominator)

    @classmethod
    def from_terms(cls, terms, trunc=None):
        """Build from (exponent, coefficient) pairs; exponents are rationals."""
        terms = [(Fraction(e), c) for e, c in terms]
        N = 1
        for e, _ in terms:
            N = N * e.denominator // math.gcd(N, e.denominator)
        out = {}
        for e, c in terms:
            q = int(e * N)
            out[q] = out.get(q, 0) + _coef(c)
        t = None if trunc is None else int(math.floor(Fraction(trunc) * N))
        return cls(out, N, t)

    def terms(self):
        return [(Fraction(q, self.N), c) for q, c in self.coeffs.items()]

    @property
    def trunc_exponent(self):
        return None if self.trunc is None else Fraction(self.trunc, self.N)

    def is_zero(self):
        return not self.coeffs

    def _regrid(self, N):
        f = N // self.N
        t = None if self.trunc is None else self.trunc * f
        return {q * f: c for q, c in self.coeffs.items()}, t

    def __add__(self, other):
        other = _lift(other)
        N = math.lcm(self.N, other.N)
        a, ta = self._regrid(N)
        b, tb = other._regrid(N)
        out = dict(a)
        for q, c in b.items():
            out[q] = out.get(q, 0) + c
        return PuiseuxPoly(out, N, _min_trunc(ta, tb))

    __radd__ = __add__

    def __neg__(self):
        return PuiseuxPoly({q: -c for q, c in self.coeffs.items()}, self.N, self.trunc)

    def __sub__(self, other):
        return self + (-_lift(other))

    def __rsub__(self, other):
        return _lift(other) - self

    def __mul__(self, other):
        other = _lift(other)
        N = math.lcm(self.N, other.N)
        a, ta = self._regrid(N)
        b, tb = other._regrid(N)
        out = {}
        for qa, ca in a.items():
            for qb, cb in b.items():
                out[qa + qb] = out.get(qa + qb, 0) + ca * cb
        # an unknown remainder of one factor pollutes the product from
        # (its truncation + leading order of the other factor) upward
        t = None
        if ta is not None:
            lb = min(b) if b else tb
            if lb is not None:
                t = ta + lb
        if tb is not None:
            la = min(a) if a else ta
            if la is not None:
                t = _min_trunc(t, tb + la)
        return PuiseuxPoly(out, N, t)

    __rmul__ = __mul__

    def __pow__(self, k):
        if k < 0 or int(k) != k:
            raise PuiseuxError("only non-negative integer powers are supported")
        out = PuiseuxPoly({0: 1})
        for _ in range(k):
            out = out * self
        return out

    def __eq__(self, other):
        if not isinstance(other, PuiseuxPoly):
            other = _lift(other)
        return (self.N, self.coeffs, self.trunc) == (other.N, other.coeffs, other.trunc)

    def __hash__(self):
        return hash((self.N, tuple(self.coeffs.items()), self.trunc))

    def __repr__(self):
        body = " + ".join(f"{c}*x^({Fraction(q, self.N)})" for q, c in self.coeffs.items()) or "0"
        if self.trunc is not None:
            body += f" + O(x^({Fraction(self.trunc, self.N)}+))"
        return f"PuiseuxPoly({body})"

    def __call__(self, x):
        return self.evaluate(x)

    def evaluate(self, x, k=0):
        """k-th derivative at x > 0 (numpy arrays welcome)."""
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        for q, c in self.coeffs.items():
            p = q / self.N
            fall = 1.0
            for i in range(k):
                fall *= p - i
            if fall == 0.0:
                continue
            out = out + float(c) * fall * np.power(x, p - k)
        return out

    def on_jets(self, X):
        """Evaluate on a ``JetArray`` carrier (Taylor-mode differentiation)."""
        m = X.space.m
        derivs = [self.evaluate(X.value, k) for k in range(m + 1)]
        return X.compose(derivs)


def _lift(v):
    if isinstance(v, PuiseuxPoly):
        return v
    return PuiseuxPoly({0: v})


def _min_trunc(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return min(a, b)


def puiseux_mul_add(a, b, op):
    if op in ("+", "add"):
        return a + b
    if op in ("*", "mul"):
        return a * b
    if op in ("-", "sub"):
        return a - b
    raise PuiseuxError(f"unknown operation {op!r}")


def puiseux_derivative(a):
    out = {}
    for q, c in a.coeffs.items():
        if q == 0:
            continue
        out[q - a.N] = c * Fraction(q, a.N) if isinstance(c, Fraction) else c * q / a.N
    t = None if a.trunc is None else a.trunc - a.N
    return PuiseuxPoly(out, a.N, t)


def leading_order(a):
    if a.is_zero():
        raise PuiseuxError("leading order of the zero series is undefined")
    return Fraction(min(a.coeffs), a.N)


def leading_coefficient(a):
    if a.is_zero():
        raise PuiseuxError("zero series")
    return a.coeffs[min(a.coeffs)]


@dataclass
class CurveLadder:
    curves: list
    delta: float


def _sample_grid(delta, n=2000):
    geo = delta * np.logspace(-8, 0, n // 2)
    lin = np.linspace(delta / n, delta, n // 2)
    return np.unique(np.concatenate([geo, lin]))


def curve_ladder_validate(ladder, samples=2000):
    """Check 0 = psi_0 < psi_1 < ... < psi_smax = x on (0, delta].

    Returns (ok, delta_refined).  Ordering near 0 is decided from leading
    orders; the interval is then confirmed by dense sampling and, where a
    crossing shows up, shrunk to just below the first crossing.
    """
    curves = ladder.curves
    delta = float(ladder.delta)
    if len(curves) < 2 or not curves[0].is_zero():
        return False, 0.0
    if curves[-1] != PuiseuxPoly({1: 1}):
        return False, 0.0
    limit = delta
    for lo, hi in zip(curves, curves[1:]):
        d = hi - lo
        if d.is_zero() or float(leading_coefficient(d)) <= 0:
            return False, 0.0
        xs = _sample_grid(limit, samples)
        vals = d.evaluate(xs)
        bad = np.nonzero(vals <= 0)[0]
        if bad.size:
            i = bad[0]
            a = xs[i - 1] if i > 0 else 0.0
            b = xs[i]
            for _ in range(80):
                mid = 0.5 * (a + b)
                if d.evaluate(mid) > 0:
                    a = mid
                else:
                    b = mid
            limit = a
            if limit <= 0:
                return False, 0.0
    return True, float(limit)


class UniformityError(ValueError):
    def __init__(self, msg, diagnostics):
        super().__init__(msg)
        self.diagnostics = diagnostics


def uniformity_exponent(xs, ys, F, cap=16, stability=1.1):
    """Smallest integer N with |F(x, y)| <= A(x) y^(1/N) on a sampled grid.

    ``F`` has shape (len(xs), len(ys)).  For each candidate N the ratio
    |F| / y^(1/N) is maximized over the finest y-decade and over the
    decade above it; N is accepted when, for every x, the finer supremum is
    finite and exceeds the coarser one by at most ``stability``.
    Returns (N, A) where A[i] is the supremum over all y.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    F = np.abs(np.asarray(F, dtype=float))
    if F.shape != (xs.size, ys.size):
        raise ValueError("F must have shape (len(xs), len(ys))")
    if np.any(ys <= 0):
        raise ValueError("y samples must be positive")
    ymin = ys.min()
    if ys.max() < 100 * ymin:
        raise ValueError("y grid must span at least two decades")
    fine = ys <= 10 * ymin
    coarse = (ys > 10 * ymin) & (ys <= 100 * ymin)
    if not fine.any() or not coarse.any():
        raise ValueError("y grid too sparse in its finest decades")
    # the data should tend to 0 as y -> 0
    rowmax = F.max(axis=1)
    finemax = F[:, fine].max(axis=1)
    if np.any((rowmax > 0) & (finemax >= rowmax)):
        raise UniformityError("F does not decay as y -> 0", {"rows": np.nonzero(finemax >= rowmax)[0].tolist()})
    diag = {}
    for N in range(1, cap + 1):
        R = F / ys[None, :] ** (1.0 / N)
        sup_f = R[:, fine].max(axis=1)
        sup_c = R[:, coarse].max(axis=1)
        ok = np.isfinite(sup_f).all() and np.all(sup_f <= stability * sup_c + 1e-300)
        diag[N] = float(np.max(sup_f / np.maximum(sup_c, 1e-300)))
        if ok:
            return N, R.max(axis=1)
    raise UniformityError(f"no N <= {cap} gives a stable envelope", diag)
