import random
from fractions import Fraction

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings, strategies as st

from artifact.elimination import (ParamLinearSystem, check_bound, eliminate, reduced_solution,
                                  verify_equivalence)


def poly_system(rng, N, M, nvar=2, deg=2, zero_prob=0.3):
    """Coefficients are small integer polynomials in the parameters."""
    def poly():
        if rng.random() < zero_prob:
            return {}
        return {(rng.randint(0, deg), rng.randint(0, deg))[:nvar]: rng.randint(-3, 3) for _ in range(2)}

    Cp = [[poly() for _ in range(M)] for _ in range(N)]
    gp = [poly() for _ in range(N)]

    def ev(p, x):
        return sum(c * np.prod([xi ** e for xi, e in zip(x, k)]) for k, c in p.items())

    sysm = ParamLinearSystem(N, M, lambda x: [[ev(p, x) for p in r] for r in Cp], lambda x: [ev(p, x) for p in gp])
    return sysm, Cp, gp, ev


def test_diagonal_system_pieces():
    sysm = ParamLinearSystem(2, 2, lambda x: [[x[0], 0], [0, x[0] - 1]], lambda x: [1, 1])
    samples = [(t,) for t in np.linspace(-1, 2, 13)]
    pieces = eliminate(sysm, samples)
    assert verify_equivalence(sysm, pieces, samples).ok
    by_point = {int(p): piece for piece in pieces for p in piece.points}
    assert by_point[4].k == 1  # x = 0
    assert by_point[8].k == 1  # x = 1
    assert not by_point[4].consistent()[list(by_point[4].points).index(4)]
    assert all(by_point[i].k == 2 for i in range(13) if i not in (4, 8))


@pytest.mark.parametrize("seed", range(8))
def test_rank_and_consistency_match_exact_oracle(seed):
    rng = random.Random(seed)
    N, M = rng.randint(1, 4), rng.randint(1, 4)
    sysm, Cp, gp, ev = poly_system(rng, N, M)
    samples = [(Fraction(rng.randint(-4, 4), 2), Fraction(rng.randint(-4, 4), 2)) for _ in range(12)]
    samples = list(dict.fromkeys(samples)) + [(Fraction(0), Fraction(0))]
    fsamples = [tuple(float(v) for v in s) for s in samples]
    pieces = eliminate(sysm, fsamples)
    assert check_bound(pieces)
    for piece in pieces:
        cons = piece.consistent()
        for local, p in enumerate(piece.points):
            x = samples[p]
            C = sp.Matrix([[ev(q, x) for q in r] for r in Cp])
            g = sp.Matrix([ev(q, x) for q in gp])
            assert piece.k == C.rank()
            assert bool(cons[local]) == (C.rank() == C.row_join(g).rank())


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(1, 5), st.integers(1, 5))
def test_random_systems_are_equivalent(seed, N, M):
    rng = random.Random(seed)
    sysm, *_ = poly_system(rng, N, M)
    samples = [tuple(v) for v in np.random.default_rng(seed).uniform(-1, 1, (20, 2))]
    samples += [(0.0, 0.0), (1.0, 0.0)]
    pieces = eliminate(sysm, samples)
    assert check_bound(pieces)
    assert all(p.k <= min(N, M) for p in pieces)
    assert verify_equivalence(sysm, pieces, samples).ok


def test_corrupted_piece_is_caught():
    rng = random.Random(7)
    sysm, *_ = poly_system(rng, 3, 3, zero_prob=0.0)
    samples = [tuple(v) for v in np.random.default_rng(0).uniform(-1, 1, (10, 2))]
    pieces = eliminate(sysm, samples)
    piece = max(pieces, key=lambda p: p.k)
    piece.gtilde = piece.gtilde + 1e-3
    rep = verify_equivalence(sysm, pieces, samples)
    assert not rep.ok and rep.witness is not None


def test_reduced_solution_solves_system():
    sysm = ParamLinearSystem(2, 3, lambda x: [[1, x[0], 0], [0, 1, 2]], lambda x: [1, x[0]])
    samples = [(0.5,), (2.0,)]
    for piece in eliminate(sysm, samples):
        for local, p in enumerate(piece.points):
            xp, basis = reduced_solution(piece, local, 3)
            C, g = sysm.evaluate([samples[p]])
            assert np.allclose(C[0] @ xp, g[0]) and np.allclose(C[0] @ basis.T, 0)
