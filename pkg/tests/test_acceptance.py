"""Acceptance criteria with their tolerances and runtime limits.

Each test records one PASS/FAIL line; the lines are printed together at the
end of the run (see conftest.py).
"""

import itertools
import math
import random
import time
from fractions import Fraction

import numpy as np
import pytest

from artifact.bundles import (candidate_residuals, iterate_to_stability, kollar_nowak_bundle,
                              kollar_nowak_coefficients, oscillating_fixture, section_distances, square_fixture)
from artifact.elimination import check_bound, eliminate, verify_equivalence
from artifact.hellyselect import SeminormFamily, select_representatives, verify_domination
from artifact.jetcore import Jet, JetSpace
from artifact.patching import (CuspRegion, FieldPiece, PatchError, cm_verify, make_cutoff, partition_of_unity,
                               patch_cusp)
from artifact.puiseux import PuiseuxPoly, uniformity_exponent
from artifact import tracepipeline as tp
from conftest import ACCEPTANCE, random_point, random_poly
from test_elimination import poly_system


class Criterion:
    def __init__(self, number, title, limit):
        self.number, self.title, self.limit = number, title, limit

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, typ, exc, tb):
        dt = time.perf_counter() - self.t0
        ok = typ is None and dt < self.limit
        why = "" if typ is None else f" ({typ.__name__}: {exc})"
        ACCEPTANCE.append(f"{'PASS' if ok else 'FAIL'} criterion {self.number}: {self.title} "
                          f"[{dt:.2f} s, limit {self.limit:g} s]{why}")
        if typ is None:
            assert dt < self.limit, f"criterion {self.number} took {dt:.2f} s"
        return False


def taylor_oracle(poly, base, m):
    """Coefficients of P about base: sum_e c_e prod_i C(e_i, a_i) b_i^(e_i - a_i)."""
    n = len(base)
    out = []
    for a in JetSpace(n, m).indices:
        s = Fraction(0)
        for e, c in poly.items():
            if all(ei >= ai for ei, ai in zip(e, a)):
                s += c * math.prod(math.comb(ei, ai) * bi ** (ei - ai) for ei, ai, bi in zip(e, a, base))
        out.append(s)
    return out


def poly_product(p, q):
    out = {}
    for (e, c), (f, d) in itertools.product(p.items(), q.items()):
        k = tuple(x + y for x, y in zip(e, f))
        out[k] = out.get(k, 0) + c * d
    return out


def test_criterion_1_jet_algebra():
    rng = random.Random(2024)
    cases = []
    for _ in range(1000):
        n, m = rng.randint(1, 3), rng.randint(0, 4)
        base = random_point(rng, n)
        P, Q, R = (random_poly(rng, n, rng.randint(0, 4), terms=3) for _ in range(3))
        oracle = [taylor_oracle(p, base, m) for p in (P, Q, R, poly_product(P, Q))]
        cases.append((JetSpace(n, m), base, oracle))
    # the oracle is computed above; the limit applies to the jet arithmetic
    with Criterion(1, "jet product and ring axioms exact on 1000 pairs", 5.0):
        for sp_, base, oracle in cases:
            JP, JQ, JR, JPQ = (Jet(base, sp_, c, exact=True) for c in oracle)
            assert JP * JQ == JPQ
            assert JP * JQ == JQ * JP
            assert (JP * JQ) * JR == JP * (JQ * JR)
            assert JP * (JQ + JR) == JP * JQ + JP * JR
            assert JP * Jet.constant(base, sp_, Fraction(1), exact=True) == JP


def test_criterion_2_glaeser():
    with Criterion(2, "Glaeser refinement on square, oscillating and Kollar-Nowak bundles", 30.0):
        sq = square_fixture()
        out, rep = iterate_to_stability(sq)
        assert rep.stable and rep.iterations <= 2
        assert out.fibers[0].dim == 0 and abs(out.fibers[0].offset[1]) <= 1e-4
        jets = [np.array([x * x, 2 * x]) for x in sq.points[:, 0]]
        assert np.max(section_distances(out, jets)) <= 1e-8
        osc = oscillating_fixture()
        out_o, rep_o = iterate_to_stability(osc)
        assert out_o.fibers[0].is_empty and 0 in rep_o.emptied_points
        kn = kollar_nowak_bundle(5)
        out_k, _ = iterate_to_stability(kn)
        for before, after in ((sq, out), (osc, out_o), (kn, out_k)):
            assert all(fa.subset_of(fb, 1e-8) for fa, fb in zip(after.fibers, before.fibers))


def test_criterion_3_elimination():
    with Criterion(3, "200 random systems equivalent to the dense oracle", 20.0):
        for seed in range(200):
            rng = random.Random(seed)
            N, M = rng.randint(1, 5), rng.randint(1, 5)
            sysm, *_ = poly_system(rng, N, M)
            samples = [tuple(v) for v in np.random.default_rng(seed).uniform(-1, 1, (47, 2))]
            samples += [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)]
            pieces = eliminate(sysm, samples)
            assert check_bound(pieces)
            assert all(p.k <= min(N, M) for p in pieces)
            rep = verify_equivalence(sysm, pieces, samples, tol=1e-8)
            assert rep.ok, (seed, rep)


def test_criterion_4_helly():
    with Criterion(4, "circle family L <= 9, C <= 10; truncated selection gives a witness", 10.0):
        a = np.arange(64) * np.pi / 64
        fam = SeminormFamily(2, [[[np.cos(t), np.sin(t)]] for t in a])
        sel = select_representatives(fam, samples=10_000)
        assert sel.L <= 9 and sel.C <= 10
        assert verify_domination(fam, sel, samples=10_000).ok
        pair = SeminormFamily(2, [[[1.0, 0.0]], [[0.0, 1.0]]])
        rep = verify_domination(pair, select_representatives(pair, max_members=1))
        assert not rep.ok and rep.witness["selected_max"] == 0.0


def test_criterion_5_patching():
    with Criterion(5, "cusp patching: cm_verify, exact partition and locality, named witness", 30.0):
        m = 2
        reg = CuspRegion(PuiseuxPoly(), PuiseuxPoly({2: 1}), 1.0)
        prof = make_cutoff(2 * (m + 1), m)
        zero = FieldPiece.zero("-")
        Fp = FieldPiece(lambda X, Y: Y ** 3, "+")
        F = patch_cusp(Fp, zero, reg, prof, m)
        rep = cm_verify(F, m)
        assert rep.ok and all(e > m - sum(al) + 0.1 for al, e in rep.exponents.items())
        xs = np.repeat([0.05, 0.2, 0.6], 60)
        ys = np.tile(np.linspace(0, 1, 60), 3) * xs ** 2
        Tp, Tm = partition_of_unity(reg, prof, xs, ys, m=m)
        assert np.all(Tp.value + Tm.value == 1.0) and np.all(Tp.c[1:] + Tm.c[1:] == 0.0)
        x = np.full(30, 0.4)
        lo, hi = x ** 2 * np.linspace(0, 1 / 3, 30), x ** 2 * np.linspace(2 / 3, 1, 30)
        assert np.array_equal(F.jets(x, lo, m).c, zero.jets(x, lo, m).c)
        assert np.array_equal(F.jets(x, hi, m).c, Fp.jets(x, hi, m).c)
        bad = FieldPiece(lambda X, Y: Y ** 2, "+")
        with pytest.raises(PatchError):
            patch_cusp(bad, zero, reg, prof, m)
        rep = cm_verify(patch_cusp(bad, zero, reg, prof, m, force=True), m)
        assert not rep.ok and len(rep.witness()["alpha"]) == 2


def test_criterion_6_pipeline():
    with Criterion(6, "x*y on psi_1 = x/2: synthesis, verify_section, cm_verify, F_min exponent", 60.0):
        nf = tp.xy_fixture()
        _, sel, sec = tp.run_pipeline(nf)
        assert sel.exists and sel.exponent > 0.1
        xs = tp.default_ladder(1.0)
        assert np.max(np.abs(sec.components[0](xs, xs / 2) - xs * xs / 2)) <= 1e-6
        assert tp.verify_section(nf, sec.components, tol=1e-6).ok
        assert all(r.ok for r in sec.cm_reports)


def test_criterion_7_kollar_nowak():
    with Criterion(7, "Kollar-Nowak fibers match the dense solver; candidate residuals", 5.0):
        b = kollar_nowak_bundle(9)
        assert len(b.fibers) == 729
        for f, z in zip(b.fibers, b.points):
            a, bb, c = kollar_nowak_coefficients(z)
            A = np.array([[a, bb]])
            sol = np.linalg.lstsq(A, [c], rcond=None)[0]
            solvable = abs(A @ sol - c)[0] <= 1e-12 * max(1.0, abs(c))
            degenerate = a == 0 and bb == 0
            assert (not f.is_empty) == solvable
            assert f.dim == (2 if degenerate else 1) or f.is_empty
        res = candidate_residuals(b, lambda z: (0.0, z[0]))
        assert res.shape == (729,) and np.all(np.isfinite(res)) and res.max() > 0


def test_criterion_8_uniformity():
    with Criterion(8, "uniformity exponent N = 3 for y^(1/3), N = 2 and A ~ x for x y^(1/2)", 5.0):
        xs, ys = np.logspace(-6, 0, 64), np.logspace(-12, 0, 64)
        N, _ = uniformity_exponent(xs, ys, np.ones((64, 1)) * ys[None, :] ** (1 / 3))
        assert N == 3
        N, A = uniformity_exponent(xs, ys, xs[:, None] * ys[None, :] ** 0.5)
        assert N == 2 and np.all(np.abs(A / xs - 1) <= 0.05)
