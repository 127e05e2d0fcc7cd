"""Selecting a few seminorms that dominate a finite family up to a constant.

Members are matrices M_w with p_w(v) = |M_w v|_2 (mode "l2") or
max_r |(M_w v)_r| (mode "linf").  A family may carry ``anchors``: extra
seminorms added to every member, p*_w = sum_anchor p_anchor + p_w, which is
how a reduced family is turned into a family of norms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import ndtri
from scipy.stats import qmc

DEFAULT_SEED = 20240607


class SelectionError(ValueError):
    pass


@dataclass
class SeminormFamily:
    dim: int
    members: list
    mode: str = "l2"
    anchors: list = field(default_factory=list)
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        self.members = [np.atleast_2d(np.asarray(M, dtype=float)) for M in self.members]
        self.anchors = [np.atleast_2d(np.asarray(M, dtype=float)) for M in self.anchors]
        for M in self.members + self.anchors:
            if M.shape[1] != self.dim:
                raise SelectionError(f"member of shape {M.shape} does not act on R^{self.dim}")
        if self.mode not in ("l2", "linf"):
            raise SelectionError(f"unknown mode {self.mode!r}")

    def _norm(self, M, V):
        W = V @ M.T
        if self.mode == "l2":
            return np.sqrt((W * W).sum(axis=1))
        return np.abs(W).max(axis=1, initial=0.0)

    def evaluate(self, V, indices=None):
        """Matrix of p_w(v): rows are members, columns are the rows of V."""
        V = np.atleast_2d(V)
        idx = range(len(self.members)) if indices is None else indices
        base = np.zeros(V.shape[0])
        for A in self.anchors:
            base = base + self._norm(A, V)
        out = np.empty((len(idx), V.shape[0]))
        for r, i in enumerate(idx):
            out[r] = self._norm(self.members[i], V) + base
        return out


@dataclass
class SelectionResult:
    indices: list
    C: float
    history: list = field(default_factory=list)

    @property
    def L(self):
        return len(self.indices)


def sphere_samples(dim, count, seed=DEFAULT_SEED, skip=0):
    """Low-discrepancy points on the unit sphere of R^dim (scrambled Halton
    mapped through the Gaussian quantile and normalized)."""
    if dim == 1:
        return np.array([[1.0], [-1.0]])
    sampler = qmc.Halton(d=dim, scramble=True, seed=seed)
    if skip:
        sampler.fast_forward(skip)
    U = sampler.random(count)
    U = np.clip(U, 1e-12, 1 - 1e-12)
    G = ndtri(U)
    G /= np.linalg.norm(G, axis=1, keepdims=True)
    return G


def _stack(fam):
    mats = fam.members + fam.anchors
    if not mats:
        return np.zeros((0, fam.dim))
    return np.vstack(mats)


def null_space_reduce(fam, rtol=1e-10):
    """Common null space H of the family and a reduction to norms.

    Returns (quotient family, lambda indices, basis of H, basis of a
    complement Q).  The quotient acts on coordinates w with v = Q w and
    carries the chosen lambdas as anchors, so every quotient member is a norm.
    Singular values within two decades of the cutoff make the rank ambiguous;
    they are listed in ``quotient.flags["near_cutoff"]`` (relative to the
    largest) and the rank is left as computed.
    """
    S = _stack(fam)
    D = fam.dim
    if S.size == 0 or not np.any(S):
        return (SeminormFamily(0, [np.zeros((1, 0)) for _ in fam.members], fam.mode),
                [], np.eye(D), np.zeros((D, 0)))
    _, s, Vt = np.linalg.svd(S)
    r = int((s > rtol * s[0]).sum())
    rel = s / s[0]
    near = [float(v) for v in rel if 1e-2 * rtol < v < 1e2 * rtol]
    Q = Vt[:r].T
    H = Vt[r:].T
    # greedily keep members that shrink the running null space
    lambdas = []
    current = np.zeros((0, D))
    rank = 0
    for i, M in enumerate(fam.members):
        trial = np.vstack([current, M])
        rk = np.linalg.matrix_rank(trial, tol=rtol * max(1.0, np.abs(trial).max()))
        if rk > rank:
            lambdas.append(i)
            current, rank = trial, rk
        if rank == r:
            break
    quotient = SeminormFamily(
        r, [M @ Q for M in fam.members], fam.mode,
        anchors=[A @ Q for A in fam.anchors] + [fam.members[i] @ Q for i in lambdas])
    if near:
        quotient.flags["near_cutoff"] = near
    return quotient, lambdas, H, Q


def _ratio(sup_all, sel_max):
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(sel_max > 0, sup_all / sel_max, np.where(sup_all > 0, np.inf, 1.0))
    return r


def select_representatives(fam, samples=10_000, seed=DEFAULT_SEED, plateau=0.01, max_members=None):
    """Greedy selection of members whose maximum dominates the family sup."""
    if not fam.members:
        raise SelectionError("empty family")
    cap = max_members if max_members is not None else 3 ** max(fam.dim, 1)
    if fam.dim == 0:
        return SelectionResult([0], 1.0, [1.0])
    V = sphere_samples(fam.dim, samples, seed)
    P = fam.evaluate(V)
    sup_all = P.max(axis=0)
    chosen = []
    cur = np.zeros(V.shape[0])
    best_ratio = np.inf
    history = []
    while len(chosen) < cap:
        cand = np.maximum(cur[None, :], P)
        ratios = _ratio(sup_all[None, :], cand).max(axis=1)
        # among infinite ratios prefer members covering more samples
        zeros = (cand <= 0).sum(axis=1)
        order = np.lexsort((np.arange(len(ratios)), zeros, ratios))
        i = int(order[0])
        r = float(ratios[i])
        if chosen and np.isfinite(best_ratio) and (best_ratio - r) < plateau * best_ratio:
            break
        chosen.append(i)
        cur = cand[i]
        best_ratio = r
        history.append(r)
        if r <= 1.0:
            break
    C = _polish(fam, chosen, V, sup_all, cur) if np.isfinite(best_ratio) and best_ratio > 1.0 else best_ratio
    return SelectionResult(chosen, max(C, 1.0), history)


def _polish(fam, chosen, V, sup_all, cur, top=8, margin=1e-3):
    """Sharpen the sampled worst ratio by local search around the worst samples.

    The returned constant carries a small relative margin so that it bounds
    the ratio on fresh samples as well.
    """
    ratio = _ratio(sup_all, cur)
    worst = float(ratio.max())

    def neg(w):
        n = np.linalg.norm(w)
        if n == 0:
            return 0.0
        P = fam.evaluate(w[None, :] / n)
        r = _ratio(P.max(axis=0), P[chosen].max(axis=0))[0]
        return -min(float(r), 1e12)

    for k in np.argsort(ratio)[::-1][:top]:
        res = minimize(neg, V[k], method="Nelder-Mead",
                       options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 400 * fam.dim})
        worst = max(worst, -float(res.fun))
    return worst * (1 + margin)


@dataclass
class DominationReport:
    ok: bool
    worst_ratio: float
    witness: object = None
    samples: int = 0


def verify_domination(fam, sel, samples=10_000, seed=DEFAULT_SEED + 1):
    """Sampled check of sup_w p_w(v) <= C max_selected p(v) on fresh points.

    Unit vectors in the common kernel of the selected members are added to
    the sample, so a selection that misses a direction is caught exactly.
    """
    V = sphere_samples(fam.dim, samples, seed)
    sel_stack = np.vstack([fam.members[i] for i in sel.indices] + fam.anchors)
    _, s, Vt = np.linalg.svd(sel_stack)
    r = int((s > 1e-12 * max(s[0], 1e-300)).sum()) if s.size else 0
    extra = Vt[r:]
    if extra.size:
        V = np.vstack([extra, V])
    P = fam.evaluate(V)
    sup_all = P.max(axis=0)
    sel_max = P[sel.indices].max(axis=0)
    ratio = _ratio(sup_all, sel_max)
    k = int(np.argmax(ratio))
    worst = float(ratio[k])
    ok = worst <= sel.C * (1 + 1e-6)
    witness = None if ok else {"v": V[k].tolist(), "family_sup": float(sup_all[k]),
                               "selected_max": float(sel_max[k])}
    return DominationReport(ok, worst, witness, V.shape[0])
