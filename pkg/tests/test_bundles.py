import itertools
from fractions import Fraction

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings, strategies as st

from artifact.bundles import (AffineFiber, BundleError, RefinementParams, SampledBundle, decay_subspace,
                              finiteness_certificate, fiber_from_constraints, glaeser_refine_once,
                              iterate_to_stability, kollar_nowak_bundle, kollar_nowak_coefficients,
                              candidate_residuals, module_closure, oscillating_fixture, section_distances,
                              square_fixture, value_functional)
from artifact.jetcore import Jet, JetSpace, JetVector


def square_jets(b):
    """Jets of x^2 at the sample points, as coefficient vectors."""
    return [np.array([x * x, 2 * x]) for x in b.points[:, 0]]


@settings(max_examples=30)
@given(st.integers(0, 10 ** 6), st.integers(1, 5))
def test_constraint_fiber_matches_sympy(seed, rows):
    rng = np.random.default_rng(seed)
    space = JetSpace(2, 1, 2)
    A = rng.integers(-3, 4, size=(rows, 6))
    A[rng.random(rows) < 0.3] = 0
    z = rng.integers(-3, 4, size=6)
    b = A @ z
    f = fiber_from_constraints([(a, v) for a, v in zip(A, b)], space, (0.0, 0.0))
    M = sp.Matrix(A.tolist())
    assert f.dim == 6 - M.rank()
    assert np.allclose(A @ f.offset, b)
    assert f.contains(z.astype(float))
    for v in M.nullspace():
        assert f.contains(f.offset + np.array(v, dtype=float).ravel())


def test_inconsistent_constraints_give_empty():
    space = JetSpace(1, 0)
    f = fiber_from_constraints([([1.0], 1.0), ([2.0], 1.0)], space, (0.0,))
    assert f.is_empty and f.dim == -1 and f.distance([0.0]) == np.inf


def test_subset_and_same():
    space = JetSpace(1, 1)
    line = fiber_from_constraints([([1.0, 0.0], 2.0)], space, (0.0,))
    pt = AffineFiber.point(space, (0.0,), [2.0, 5.0])
    assert pt.subset_of(line) and not line.subset_of(pt)
    assert line.same_as(AffineFiber(space, (0.0,), [2.0, -1.0], [[0.0, 3.0]]))
    assert AffineFiber.empty(space, (0.0,)).subset_of(pt)


def test_module_closure_adds_higher_monomials():
    space = JetSpace(1, 2)
    f = AffineFiber(space, (0.0,), np.zeros(3), [[0.0, 1.0, 0.0]])
    g = module_closure(f)
    assert g.dim == 2 and g.contains([0.0, 0.0, 1.0])
    with pytest.raises(BundleError):
        module_closure(AffineFiber.empty(space, (0.0,)))


def test_value_functional():
    space = JetSpace(1, 2, 2)
    row = value_functional(space, (0.0,), (2.0,), component=1, alpha=(1,))
    J = JetVector.from_vector((0.0,), space, [0, 0, 0, 1.0, 3.0, 5.0])
    # second component is 1 + 3x + 5x^2, derivative at 2 is 23
    assert row @ J.to_vector() == pytest.approx(23.0)


def test_square_fixture_pins_slope():
    b = square_fixture()
    out, rep = iterate_to_stability(b)
    assert rep.stable and rep.iterations <= 2
    f0 = out.fibers[0]
    assert f0.dim == 0 and abs(f0.offset[1]) <= 1e-4 and abs(f0.offset[0]) <= 1e-12
    assert np.max(section_distances(out, square_jets(b))) <= 1e-8
    assert all(fa.subset_of(fb, 1e-8) for fa, fb in zip(out.fibers, b.fibers))


def test_oscillating_fixture_empties_origin():
    b = oscillating_fixture()
    out, rep = iterate_to_stability(b)
    assert out.fibers[0].is_empty and 0 in rep.emptied_points
    assert all(fa.subset_of(fb, 1e-8) for fa, fb in zip(out.fibers, b.fibers))
    # the interior of the dyadic set is left alone
    assert all(not out.fibers[i].is_empty for i in range(1, 36))


@settings(max_examples=8)
@given(st.integers(0, 10 ** 6))
def test_refinement_is_basis_independent(seed):
    """Reparametrizing every fiber (generators and offset) does not change the result."""
    rng = np.random.default_rng(seed)
    b = square_fixture(K=24)
    twisted = []
    for f in b.fibers:
        G = rng.normal(size=(f.dim, f.dim)) @ f.generators + 0.0
        off = f.offset + rng.normal(size=f.dim) @ f.generators
        twisted.append(AffineFiber(b.space, f.base, off, G))
    b2 = SampledBundle(b.space, b.points, twisted)
    o1, _ = glaeser_refine_once(b)
    o2, _ = glaeser_refine_once(b2)
    assert all(f.same_as(g, 1e-7) for f, g in zip(o1.fibers, o2.fibers))


def test_decay_subspace_recovers_pinned_direction():
    # |M_t u - e_t| -> 0 forces u_0 = 1 and leaves u_1 free
    ds = 2.0 ** -np.arange(8)
    Ms = [np.array([[1.0, d]]) for d in ds]
    es = [np.array([1.0 + 3 * d * d]) for d in ds]
    res = decay_subspace(Ms, es, ds)
    assert res.ok and res.pinned == 1 and res.free.shape == (2, 1)
    # the limit set is {u_0 = 1}; the ladder resolves it to well below d_min = 2^-7
    assert res.offset[0] == pytest.approx(1.0, abs=1e-4) and abs(res.offset[1]) < 1e-4
    assert abs(res.free[0, 0]) < 1e-4
    bad = decay_subspace(Ms, [np.array([(-1) ** i]) for i in range(8)], ds)
    assert not bad.ok


def test_finiteness_certificate():
    b = square_fixture(K=10)
    assert finiteness_certificate(b, 10.0, 2)
    assert not finiteness_certificate(b, 1e-3, 2)
    empty = oscillating_fixture(K=10)
    empty.fibers[0] = AffineFiber.empty(empty.space, (0.0,))
    assert not finiteness_certificate(empty, 10.0, 2)


def test_kollar_nowak_fibers_match_exact_rank():
    b = kollar_nowak_bundle(9)
    g = [Fraction(k, 4) for k in range(-4, 5)]
    for f, z in zip(b.fibers, itertools.product(g, g, g)):
        a, bb, c = kollar_nowak_coefficients(z)
        M = sp.Matrix([[a, bb]])
        aug = sp.Matrix([[a, bb, c]])
        solvable = M.rank() == aug.rank()
        assert (not f.is_empty) == solvable
        if solvable:
            assert f.dim == 2 - M.rank()


def test_candidate_residuals_report_per_point():
    b = kollar_nowak_bundle(3)
    res = candidate_residuals(b, lambda z: (0.0, z[0]))
    assert res.shape == (27,)
    exact = []
    for z in b.points:
        a, bb, c = kollar_nowak_coefficients(z)
        n = np.hypot(a, bb)
        exact.append(abs(bb * z[0] - c) / n if n else abs(c) * np.inf if c else 0.0)
    assert np.allclose(res, exact, atol=1e-12)
