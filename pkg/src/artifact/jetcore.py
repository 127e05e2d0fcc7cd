"""Truncated Taylor polynomials (m-jets) of maps R^n -> R^D.

Coefficients are stored in Taylor form, c_alpha = d^alpha P(base) / alpha!,
in a dense vector ordered graded-lexicographically.  Float and exact
(``fractions.Fraction``) scalars are both supported.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np


class JetError(ValueError):
    pass


def multi_indices(n, m):
    """All n-tuples of total order <= m in graded-lex order.

    Within one total order, tuples are sorted in decreasing lexicographic
    order, so for n = 2: (0,0), (1,0), (0,1), (2,0), (1,1), (0,2), ...
    """
    out = []
    for d in range(m + 1):
        level = [a for a in itertools.product(range(d + 1), repeat=n) if sum(a) == d]
        level.sort(reverse=True)
        out.extend(level)
    return out


@lru_cache(maxsize=None)
def _tables(n, m):
    idx = multi_indices(n, m)
    pos = {a: i for i, a in enumerate(idx)}
    I, J, K = [], [], []
    for i, a in enumerate(idx):
        for j, b in enumerate(idx):
            c = tuple(p + q for p, q in zip(a, b))
            if sum(c) <= m:
                I.append(i)
                J.append(j)
                K.append(pos[c])
    tab = (np.array(I, dtype=int), np.array(J, dtype=int), np.array(K, dtype=int))
    return tuple(idx), pos, tab


@dataclass(frozen=True)
class JetSpace:
    n: int
    m: int
    D: int = 1

    def __post_init__(self):
        if self.n < 1 or self.m < 0 or self.D < 1:
            raise JetError(f"invalid jet space n={self.n} m={self.m} D={self.D}")

    @property
    def dim(self):
        """Dimension of the scalar jet space, C(n+m, n)."""
        return math.comb(self.n + self.m, self.n)

    @property
    def indices(self):
        return _tables(self.n, self.m)[0]

    def position(self, alpha):
        alpha = tuple(alpha)
        if len(alpha) != self.n:
            raise JetError(f"multi-index {alpha} has wrong length for n={self.n}")
        try:
            return _tables(self.n, self.m)[1][alpha]
        except KeyError:
            raise JetError(f"|alpha| = {sum(alpha)} exceeds m = {self.m}") from None

    def product_table(self):
        """Index triples (i, j, k) with e_i * e_j = e_k after truncation."""
        return _tables(self.n, self.m)[2]

    def scalar(self):
        return JetSpace(self.n, self.m, 1)


def _as_point(p, n=None, exact=False):
    p = tuple(p)
    if n is not None and len(p) != n:
        raise JetError(f"point {p} is not in R^{n}")
    if exact:
        return tuple(Fraction(v) for v in p)
    return tuple(float(v) for v in p)


def _coeff_array(values, exact):
    if exact:
        return np.array([Fraction(v) for v in values], dtype=object)
    return np.asarray(values, dtype=float).copy()


class Jet:
    """A scalar m-jet at a base point."""

    __slots__ = ("base", "space", "coeffs", "exact")

    def __init__(self, base, space, coeffs, exact=False):
        space = space.scalar() if space.D != 1 else space
        coeffs = list(coeffs) if not isinstance(coeffs, np.ndarray) else coeffs
        if len(coeffs) != space.dim:
            raise JetError(f"expected {space.dim} coefficients, got {len(coeffs)}")
        self.exact = bool(exact)
        self.base = _as_point(base, space.n, self.exact)
        self.space = space
        self.coeffs = _coeff_array(coeffs, self.exact)
        self.coeffs.setflags(write=False)

    @classmethod
    def zero(cls, base, space, exact=False):
        zero = Fraction(0) if exact else 0.0
        return cls(base, space, [zero] * space.dim, exact)

    @classmethod
    def constant(cls, base, space, value, exact=False):
        c = [Fraction(0) if exact else 0.0] * space.scalar().dim
        c[0] = value
        return cls(base, space, c, exact)

    @classmethod
    def monomial(cls, base, space, alpha, exact=False):
        """The jet of (x - base)^alpha."""
        c = [Fraction(0) if exact else 0.0] * space.scalar().dim
        c[space.position(alpha)] = 1
        return cls(base, space, c, exact)

    @classmethod
    def from_polynomial(cls, terms, base, space, exact=False):
        """Jet at ``base`` of sum c * x^e over ``terms`` (dict exponent -> c)."""
        origin = tuple(0 for _ in range(space.n))
        out = None
        for e, c in terms.items():
            e = tuple(e)
            deg = sum(e)
            big = JetSpace(space.n, max(deg, space.m))
            mono = Jet.monomial(origin, big, e, exact)
            moved = jet_rebase(mono, base)
            vals = [moved.coeffs[big.position(a)] * c for a in space.scalar().indices]
            term = Jet(base, space, vals, exact)
            out = term if out is None else out + term
        if out is None:
            out = Jet.zero(base, space, exact)
        return out

    def coefficient(self, alpha):
        return self.coeffs[self.space.position(alpha)]

    def _check(self, other):
        if not isinstance(other, Jet):
            raise JetError("operand is not a Jet")
        if other.space != self.space:
            raise JetError(f"space mismatch: {self.space} vs {other.space}")
        if tuple(map(float, other.base)) != tuple(map(float, self.base)):
            raise JetError(f"base mismatch: {self.base} vs {other.base}")

    def __add__(self, other):
        self._check(other)
        return Jet(self.base, self.space, self.coeffs + other.coeffs, self.exact)

    def __sub__(self, other):
        self._check(other)
        return Jet(self.base, self.space, self.coeffs - other.coeffs, self.exact)

    def __neg__(self):
        return Jet(self.base, self.space, -self.coeffs, self.exact)

    def scale(self, c):
        return Jet(self.base, self.space, self.coeffs * c, self.exact)

    def __mul__(self, other):
        return jet_multiply(self, other)

    def __eq__(self, other):
        if not isinstance(other, Jet):
            return NotImplemented
        return (self.space == other.space and self.base == other.base
                and all(a == b for a, b in zip(self.coeffs, other.coeffs)))

    def __hash__(self):
        return hash((self.space, self.base, tuple(self.coeffs)))

    def __call__(self, point):
        return jet_query(self, (0,) * self.space.n, point)

    def __repr__(self):
        return f"Jet(base={self.base}, m={self.space.m}, coeffs={list(self.coeffs)})"


class JetVector:
    """A D-tuple of jets sharing base point and space."""

    __slots__ = ("components",)

    def __init__(self, components):
        comps = tuple(components)
        if not comps:
            raise JetError("JetVector needs at least one component")
        b, s = comps[0].base, comps[0].space
        for c in comps[1:]:
            if c.base != b or c.space != s:
                raise JetError("JetVector components must share base and space")
        self.components = comps

    @property
    def base(self):
        return self.components[0].base

    @property
    def space(self):
        s = self.components[0].space
        return JetSpace(s.n, s.m, len(self.components))

    @property
    def D(self):
        return len(self.components)

    def to_vector(self):
        return np.concatenate([np.asarray(c.coeffs, dtype=float) for c in self.components])

    @classmethod
    def from_vector(cls, base, space, vec):
        vec = np.asarray(vec, dtype=float)
        d = space.dim
        if vec.shape != (space.D * d,):
            raise JetError(f"vector of length {vec.shape} does not fit {space}")
        return cls(Jet(base, space.scalar(), vec[k * d:(k + 1) * d]) for k in range(space.D))

    def rebase(self, newbase):
        return JetVector(jet_rebase(c, newbase) for c in self.components)

    def __sub__(self, other):
        return JetVector(a - b for a, b in zip(self.components, other.components))

    def __add__(self, other):
        return JetVector(a + b for a, b in zip(self.components, other.components))

    def __getitem__(self, k):
        return self.components[k]

    def __len__(self):
        return len(self.components)


def jet_multiply(a, b):
    """P (.)_x Q = J_x(PQ): product truncated at degree m about the base."""
    a._check(b)
    exact = a.exact or b.exact
    I, J, K = a.space.product_table()
    if exact:
        out = [Fraction(0)] * a.space.dim
        for i, j, k in zip(I, J, K):
            out[k] += a.coeffs[i] * b.coeffs[j]
    else:
        out = np.zeros(a.space.dim)
        np.add.at(out, K, a.coeffs[I] * b.coeffs[J])
    return Jet(a.base, a.space, out, exact)


@lru_cache(maxsize=None)
def _binomial_support(n, m):
    """For each target gamma: list of (source alpha index, exponent alpha-gamma, multiplier)."""
    idx = multi_indices(n, m)
    out = []
    for g in idx:
        rows = []
        for i, a in enumerate(idx):
            if all(ai >= gi for ai, gi in zip(a, g)):
                mult = 1
                for ai, gi in zip(a, g):
                    mult *= math.comb(ai, gi)
                rows.append((i, tuple(ai - gi for ai, gi in zip(a, g)), mult))
        out.append(rows)
    return out


def _power(d, e, exact):
    r = Fraction(1) if exact else 1.0
    for di, ei in zip(d, e):
        if ei:
            r *= di ** ei
    return r


def jet_rebase(a, newbase):
    """Re-expand the polynomial carried by ``a`` about ``newbase``."""
    newbase = _as_point(newbase, None, a.exact)
    if len(newbase) != a.space.n:
        raise JetError(f"new base {newbase} is not in R^{a.space.n}")
    d = tuple(nb - b for nb, b in zip(newbase, a.base))
    out = []
    for rows in _binomial_support(a.space.n, a.space.m):
        acc = Fraction(0) if a.exact else 0.0
        for i, e, mult in rows:
            acc += a.coeffs[i] * mult * _power(d, e, a.exact)
        out.append(acc)
    return Jet(newbase, a.space, out, a.exact)


def derivative_functional(space, alpha, base, point):
    """Row w with d^alpha P(point) = w . coeffs for any jet P at ``base``."""
    space = space.scalar()
    alpha = tuple(alpha)
    if sum(alpha) > space.m:
        raise JetError(f"|alpha| = {sum(alpha)} exceeds m = {space.m}")
    d = [float(p) - float(b) for p, b in zip(point, base)]
    w = np.zeros(space.dim)
    fact = 1
    for ai in alpha:
        fact *= math.factorial(ai)
    for i, a in enumerate(space.indices):
        if all(ai >= gi for ai, gi in zip(a, alpha)):
            mult = 1
            val = 1.0
            for ai, gi, di in zip(a, alpha, d):
                mult *= math.comb(ai, gi)
                if ai > gi:
                    val *= di ** (ai - gi)
            w[i] = fact * mult * val
    return w


def jet_query(a, alpha, point):
    """d^alpha of the polynomial ``a`` at ``point``."""
    alpha = tuple(alpha)
    if len(alpha) != a.space.n:
        raise JetError(f"multi-index {alpha} has wrong length")
    if sum(alpha) > a.space.m:
        raise JetError(f"|alpha| = {sum(alpha)} exceeds m = {a.space.m}")
    moved = jet_rebase(a, point)
    fact = 1
    for ai in alpha:
        fact *= math.factorial(ai)
    return moved.coefficient(alpha) * fact


def whitney_quotient(P, Q, alpha):
    """max_k |d^alpha (P_k - Q_k)(P.base)| / |P.base - Q.base|^(m - |alpha|)."""
    if isinstance(P, Jet):
        P = JetVector([P])
    if isinstance(Q, Jet):
        Q = JetVector([Q])
    if P.space != Q.space:
        raise JetError(f"space mismatch: {P.space} vs {Q.space}")
    alpha = tuple(alpha)
    m = P.space.m
    if sum(alpha) > m:
        raise JetError(f"|alpha| = {sum(alpha)} exceeds m = {m}")
    dist = math.dist([float(v) for v in P.base], [float(v) for v in Q.base])
    if dist == 0.0:
        raise JetError("coincident base points")
    worst = 0.0
    for p, q in zip(P.components, Q.components):
        diff = jet_query(p, alpha, p.base) - jet_query(q, alpha, p.base)
        worst = max(worst, abs(float(diff)))
    return worst / dist ** (m - sum(alpha))


class OneDJet:
    """m-jet at y = 0 of a function of y, attached to a parameter value xbar.

    ``coeffs[a]`` is the a-th Taylor coefficient (d/dy)^a F(xbar, 0) / a!.
    """

    __slots__ = ("coeffs", "xbar")

    def __init__(self, coeffs, xbar=0.0):
        self.coeffs = np.asarray(coeffs, dtype=float).copy()
        self.coeffs.setflags(write=False)
        self.xbar = float(xbar)

    @property
    def m(self):
        return len(self.coeffs) - 1

    def __mul__(self, other):
        if other.m != self.m:
            raise JetError("order mismatch")
        out = np.convolve(self.coeffs, other.coeffs)[: self.m + 1]
        return OneDJet(out, self.xbar)

    def __add__(self, other):
        return OneDJet(self.coeffs + other.coeffs, self.xbar)

    def derivative(self, a, y=0.0):
        """(d/dy)^a of the polynomial at y."""
        if a > self.m:
            return 0.0
        total = 0.0
        for b in range(a, self.m + 1):
            total += self.coeffs[b] * math.perm(b, a) * y ** (b - a)
        return total


class JetArray:
    """Scalar jets at many base points at once, used as a Taylor-mode
    automatic differentiation carrier.

    ``c`` has shape (dim, npts); row k holds the coefficient of the k-th
    graded-lex monomial (dx)^alpha.
    """

    __slots__ = ("space", "c")

    def __init__(self, space, c):
        self.space = space.scalar()
        self.c = np.asarray(c, dtype=float)

    @classmethod
    def variable(cls, space, values, k):
        values = np.atleast_1d(np.asarray(values, dtype=float))
        c = np.zeros((space.dim, values.size))
        c[0] = values
        if space.m >= 1:
            e = [0] * space.n
            e[k] = 1
            c[space.position(e)] = 1.0
        return cls(space, c)

    @classmethod
    def const(cls, space, value, npts):
        c = np.zeros((space.dim, npts))
        c[0] = value
        return cls(space, c)

    @property
    def npts(self):
        return self.c.shape[1]

    @property
    def value(self):
        return self.c[0]

    def _lift(self, other):
        if isinstance(other, JetArray):
            return other
        out = np.zeros_like(self.c)
        out[0] = other
        return JetArray(self.space, out)

    def __add__(self, other):
        return JetArray(self.space, self.c + self._lift(other).c)

    __radd__ = __add__

    def __sub__(self, other):
        return JetArray(self.space, self.c - self._lift(other).c)

    def __rsub__(self, other):
        return JetArray(self.space, self._lift(other).c - self.c)

    def __neg__(self):
        return JetArray(self.space, -self.c)

    def __mul__(self, other):
        if not isinstance(other, JetArray):
            return JetArray(self.space, self.c * np.asarray(other, dtype=float))
        I, J, K = self.space.product_table()
        out = np.zeros_like(self.c)
        np.add.at(out, K, self.c[I] * other.c[J])
        return JetArray(self.space, out)

    __rmul__ = __mul__

    def compose(self, derivs):
        """f(self) given derivs[k] = f^(k)(self.value), k = 0..m."""
        h = JetArray(self.space, self.c.copy())
        h.c[0] = 0.0
        out = JetArray(self.space, np.zeros_like(self.c))
        out.c[0] = derivs[0]
        power = None
        fact = 1.0
        for k in range(1, self.space.m + 1):
            power = h if power is None else power * h
            fact *= k
            out = out + power * (np.asarray(derivs[k]) / fact)
        return out

    def reciprocal(self):
        v = self.c[0]
        m = self.space.m
        derivs = []
        for k in range(m + 1):
            derivs.append((-1) ** k * math.factorial(k) * v ** (-(k + 1)))
        return self.compose(derivs)

    def __truediv__(self, other):
        if not isinstance(other, JetArray):
            return JetArray(self.space, self.c / np.asarray(other, dtype=float))
        return self * other.reciprocal()

    def __rtruediv__(self, other):
        return self._lift(other) * self.reciprocal()

    def __pow__(self, p):
        if isinstance(p, int) and p >= 0:
            out = JetArray.const(self.space, 1.0, self.npts)
            for _ in range(p):
                out = out * self
            return out
        return self.rpow(float(p))

    def rpow(self, p):
        """self ** p for real p; the value must be positive unless p is a
        non-negative integer."""
        v = self.c[0]
        derivs = []
        coef = 1.0
        for k in range(self.space.m + 1):
            with np.errstate(divide="ignore", invalid="ignore"):
                derivs.append(coef * np.power(v, p - k))
            coef *= p - k
        return self.compose(derivs)

    def partial(self, alpha):
        """Array of d^alpha at the base points."""
        alpha = tuple(alpha)
        fact = 1
        for a in alpha:
            fact *= math.factorial(a)
        return self.c[self.space.position(alpha)] * fact

    def take(self, mask):
        return JetArray(self.space, self.c[:, mask])

    def where(self, mask, other):
        return JetArray(self.space, np.where(mask[None, :], self.c, other.c))

    def truncate(self, m):
        small = JetSpace(self.space.n, m)
        rows = [self.space.position(a) for a in small.indices]
        return JetArray(small, self.c[rows])

    def to_jet(self, k, base):
        return Jet(base, self.space, self.c[:, k])
