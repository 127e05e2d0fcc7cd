"""Gaussian elimination with parameters.

A parametric system sum_j C_ij(x) X_j = g_i(x) is evaluated on a finite
sample set E.  Each elimination round splits the current piece of E by the
position of the largest remaining coefficient, normalizes that pivot to 1
and clears its column, so the solved-for block keeps |A_ij| <= 2^k after k
rounds.  Pieces are plain index sets of sample points.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ZERO_TOL = 1e-12


@dataclass
class ParamLinearSystem:
    """``coeff(x)`` returns an (N, M) array, ``rhs(x)`` an (N,) array."""

    N: int
    M: int
    coeff: object
    rhs: object

    def evaluate(self, samples):
        C = np.array([np.asarray(self.coeff(x), dtype=float).reshape(self.N, self.M) for x in samples])
        g = np.array([np.asarray(self.rhs(x), dtype=float).reshape(self.N) for x in samples])
        return C.reshape(len(samples), self.N, self.M), g.reshape(len(samples), self.N)


@dataclass
class EchelonPiece:
    """Reduced system on a piece of the sample set.

    For every point p of ``points`` (indices into the sample list):
        X[perm[i]] + sum_{j >= k} Atilde[p, i, j - k] X[perm[j]] = gtilde[p, i],  i < k
        0 = btilde[p, r]  for the remaining rows r.
    ``row_perm`` records which original equations became the pivot rows.
    """

    points: np.ndarray
    k: int
    perm: tuple
    row_perm: tuple
    Atilde: np.ndarray
    gtilde: np.ndarray
    btilde: np.ndarray
    pivots: tuple = ()
    conditioning: float = 1.0

    def consistent(self, tol=1e-8):
        if self.btilde.shape[1] == 0:
            return np.ones(len(self.points), dtype=bool)
        scale = 1.0 + np.abs(self.gtilde).max(axis=1, initial=0.0)
        return np.abs(self.btilde).max(axis=1) <= tol * scale


@dataclass
class _State:
    points: np.ndarray
    k: int
    perm: list
    row_perm: list
    A: np.ndarray  # (P, k, M - k) solved block
    b: np.ndarray  # (P, k)
    C: np.ndarray  # (P, N - k, M - k) remaining block
    g: np.ndarray  # (P, N - k)
    pivots: list = field(default_factory=list)
    min_pivot: float = np.inf


def echelon_step(state):
    """One elimination round on a piece already in k-echelon form.

    Returns a list of (state, done) pairs partitioning ``state.points``.
    """
    P = len(state.points)
    nrem, mrem = state.C.shape[1], state.C.shape[2]
    if nrem == 0 or mrem == 0:
        return [(state, True)]
    mag = np.abs(state.C).reshape(P, nrem * mrem)
    best = mag.max(axis=1)
    out = []
    good = best < ZERO_TOL
    if good.any():
        out.append((_subset(state, good), True))
    # argmax returns the first maximal entry in row-major order
    flat = mag.argmax(axis=1)
    for f in np.unique(flat[~good]):
        sel = (~good) & (flat == f)
        out.append((_pivot(_subset(state, sel), f // mrem, f % mrem), False))
    return out


def _subset(s, mask):
    return _State(s.points[mask], s.k, list(s.perm), list(s.row_perm), s.A[mask], s.b[mask],
                  s.C[mask], s.g[mask], list(s.pivots), s.min_pivot)


def _pivot(s, r, c):
    C, g, A, b = s.C.copy(), s.g.copy(), s.A.copy(), s.b.copy()
    # move pivot row to the top of the remaining block and pivot column first
    rows = [r] + [i for i in range(C.shape[1]) if i != r]
    cols = [c] + [j for j in range(C.shape[2]) if j != c]
    C, g = C[:, rows][:, :, cols], g[:, rows]
    A = A[:, :, cols]
    k = s.k
    perm = s.perm[:k] + [s.perm[k + j] for j in cols]
    row_perm = s.row_perm[:k] + [s.row_perm[k + i] for i in rows]
    piv = C[:, 0, 0]
    # normalized pivot row: |entries| <= 1 because the pivot has max modulus
    prow = C[:, 0, 1:] / piv[:, None]
    pg = g[:, 0] / piv
    acol = A[:, :, 0]
    A_new = A[:, :, 1:] - acol[:, :, None] * prow[:, None, :]
    b_new = b - acol * pg[:, None]
    ccol = C[:, 1:, 0]
    C_new = C[:, 1:, 1:] - ccol[:, :, None] * prow[:, None, :]
    g_new = g[:, 1:] - ccol * pg[:, None]
    A_full = np.concatenate([A_new, prow[:, None, :]], axis=1)
    b_full = np.concatenate([b_new, pg[:, None]], axis=1)
    return _State(s.points, k + 1, perm, row_perm, A_full, b_full, C_new, g_new,
                  s.pivots + [(s.row_perm[k + r], s.perm[k + c])],
                  min(s.min_pivot, float(np.abs(piv).min())))


def eliminate(sys, samples):
    """Partition the sample set and reduce the system on every piece."""
    samples = list(samples)
    P = len(samples)
    C, g = sys.evaluate(samples) if P else (np.zeros((0, sys.N, sys.M)), np.zeros((0, sys.N)))
    start = _State(np.arange(P), 0, list(range(sys.M)), list(range(sys.N)),
                   np.zeros((P, 0, sys.M)), np.zeros((P, 0)), C, g)
    active = [start]
    done = []
    rounds = 0
    while active:
        nxt = []
        for st in active:
            for child, finished in echelon_step(st):
                (done if finished else nxt).append(child)
        active = [s for s in nxt if len(s.points)]
        if active:
            rounds += 1
        if rounds > min(sys.N, sys.M):
            raise RuntimeError("elimination exceeded min(N, M) rounds")
    pieces = []
    for s in done:
        if len(s.points) == 0 and P:
            continue
        scale = float(np.abs(s.A).max(initial=0.0))
        cond = scale / s.min_pivot if np.isfinite(s.min_pivot) and s.min_pivot > 0 else 1.0
        pieces.append(EchelonPiece(
            points=s.points, k=s.k, perm=tuple(s.perm), row_perm=tuple(s.row_perm),
            Atilde=s.A, gtilde=s.b, btilde=s.g, pivots=tuple(s.pivots),
            conditioning=cond))
    pieces.sort(key=lambda p: int(p.points[0]) if len(p.points) else -1)
    return pieces


def check_bound(pieces):
    """True when |Atilde| <= 2^k holds exactly on every piece."""
    return all(np.all(np.abs(p.Atilde) <= 2.0 ** p.k) for p in pieces)


@dataclass
class EquivalenceReport:
    ok: bool
    worst_residual: float
    witness: object = None
    inconsistent_points: list = field(default_factory=list)
    details: list = field(default_factory=list)


def reduced_solution(piece, idx, M):
    """Particular solution (free unknowns 0) and null-space basis at one point."""
    k = piece.k
    x = np.zeros(M)
    x[list(piece.perm[:k])] = piece.gtilde[idx]
    basis = []
    for j in range(M - k):
        v = np.zeros(M)
        v[piece.perm[k + j]] = 1.0
        v[list(piece.perm[:k])] = -piece.Atilde[idx, :, j]
        basis.append(v)
    return x, np.array(basis).reshape(M - k, M)


def verify_equivalence(sys, pieces, samples, tol=1e-8):
    """Compare every piece's reduced system with a dense solve at each point."""
    samples = list(samples)
    C, g = sys.evaluate(samples)
    seen = np.zeros(len(samples), dtype=int)
    worst = 0.0
    report = EquivalenceReport(True, 0.0)

    def fail(msg, x):
        if report.ok:
            report.witness = {"point": x, "reason": msg}
        report.ok = False

    for piece in pieces:
        cons = piece.consistent(tol)
        for local, p in enumerate(piece.points):
            seen[p] += 1
            Cx, gx = C[p], g[p]
            scale = max(1.0, np.abs(Cx).max(initial=0.0), np.abs(gx).max(initial=0.0))
            xd, *_ = np.linalg.lstsq(Cx, gx, rcond=None) if sys.M else (np.zeros(0),)
            dense_res = np.abs(Cx @ xd - gx).max(initial=0.0) / (scale * (1 + np.abs(xd).max(initial=0.0)))
            dense_ok = dense_res <= tol
            if bool(cons[local]) != bool(dense_ok):
                fail("consistency disagrees with dense solve", samples[p])
            if not cons[local]:
                report.inconsistent_points.append(int(p))
                continue
            xp, basis = reduced_solution(piece, local, sys.M)
            xs = max(1.0, np.abs(xp).max(initial=0.0))
            r1 = np.abs(Cx @ xp - gx).max(initial=0.0) / (scale * xs)
            r2 = np.abs(Cx @ basis.T).max(initial=0.0) / scale if basis.size else 0.0
            # dense solution must satisfy the reduced rows
            k = piece.k
            red = xd[list(piece.perm[:k])] + (piece.Atilde[local] @ xd[list(piece.perm[k:])] if k else 0)
            r3 = np.abs(red - piece.gtilde[local]).max(initial=0.0) / (1 + np.abs(xd).max(initial=0.0)) / 2.0 ** k if k else 0.0
            rank = np.linalg.matrix_rank(Cx, tol=1e-10 * scale) if sys.M and sys.N else 0
            if rank != k:
                fail(f"rank {rank} differs from echelon depth {k}", samples[p])
            r = max(r1, r2, r3)
            worst = max(worst, r)
            if r > tol:
                fail(f"residual {r:.3e} above tolerance", samples[p])
    if np.any(seen != 1):
        fail("pieces do not partition the sample set", None)
    report.worst_residual = worst
    return report
