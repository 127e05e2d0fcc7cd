from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from artifact import tracepipeline as tp
from artifact.bundles import module_closure
from artifact.jetcore import JetArray, JetSpace
from artifact.patching import FieldPiece
from artifact.puiseux import PuiseuxPoly


def d2_fixture():
    """D = 2, F_1 = x F_0 on every strip, F_0(x, x/2) = x^2/2."""
    nf = tp.xy_fixture()
    nf.D = 2
    st_ = tp.StripSystem(1, (1, 0), lambda X, Y: [[-1.0 * X]], lambda X, Y: [0.0])
    nf.strips = {1: st_, 2: st_}
    return nf


@pytest.fixture(scope="module")
def xy_run():
    return tp.run_pipeline(tp.xy_fixture())


def test_xy_pipeline_end_to_end(xy_run):
    sys, sel, sec = xy_run
    assert sel.exists and sel.exponent > 0.1
    assert sec is not None and sec.ok
    F = sec.components[0]
    xs = tp.default_ladder(1.0)
    assert np.max(np.abs(F(xs, xs / 2) - xs * xs / 2)) <= 1e-6
    assert tp.verify_section(tp.xy_fixture(), sec.components, tol=1e-6).ok


def test_traces_of_exact_field_satisfy_rows():
    nf = tp.xy_fixture()
    F = FieldPiece(lambda X, Y: X * Y)
    xs = tp.default_ladder(1.0, 10)
    sys = tp.assemble_constraints(nf, xs=xs)
    T = tp.traces_of(nf, [F], xs)
    for i in range(len(xs)):
        A, b = sys.exact[i]
        assert np.allclose(A @ T[i], b, atol=1e-12)
    assert tp.verify_section(nf, [F]).ok


def test_perturbed_section_fails_curve_rows():
    nf = tp.xy_fixture()
    rep = tp.verify_section(nf, [FieldPiece(lambda X, Y: X * Y + 1e-3 * X ** 2)])
    assert not rep.ok and rep.failures[0]["kind"] == "curve"
    rep = tp.verify_section(nf, [FieldPiece(lambda X, Y: X * Y + 1e-3 + 0 * X)])
    assert not rep.ok and any(f["kind"] == "origin" for f in rep.failures)


def test_slope_fixture_reports_nonexistence():
    sys, sel, sec = tp.run_pipeline(tp.slope_fixture())
    assert sec is None and not sel.exists
    assert sel.nonexistence["reason"]


def test_d2_strip_pipeline():
    nf = d2_fixture()
    sys, sel, sec = tp.run_pipeline(nf)
    assert sel.exists and sec is not None and sec.ok
    xs = tp.default_ladder(1.0, 8)
    F0, F1 = sec.components
    ys = xs / 3
    assert np.allclose(F1(xs, ys), xs * F0(xs, ys), atol=1e-9)


def axis_spec(nf, s=1, side="+"):
    return tp.AxisBundleSpec(nf, s, side, tp.default_ladder(1.0, 6))


@pytest.mark.parametrize("side", ["+", "-"])
def test_axis_fiber_is_module_and_recovers_relation(side):
    spec = axis_spec(d2_fixture(), 1, side)
    b = tp.build_axis_bundle(spec)
    m = spec.nf.m
    for xb, f in zip(spec.xbars, b.fibers):
        assert not f.is_empty and f.dim == m + 1
        assert module_closure(f).dim == f.dim
        # Q = xbar P on jets in ybar: (P, Q) = (e_a, xbar e_a)
        for a in range(m + 1):
            z = np.zeros(2 * (m + 1))
            z[a], z[m + 1 + a] = 1.0, xb
            assert f.contains(z, 1e-6 * max(1.0, xb))


def test_lambda_annihilates_fiber_members():
    spec = axis_spec(d2_fixture())
    tf = tp.build_trace_functionals(spec)
    rng = np.random.default_rng(0)
    for (N, c), f in zip(tf.lam, tf.fibers.fibers):
        for _ in range(5):
            z = f.offset + rng.normal(size=f.dim) @ f.generators
            assert np.allclose(N @ z, c, atol=1e-9)
    assert tf.heights.y1_ok and tf.heights.y2_ok


def test_axis_bundle_needs_enough_probes():
    spec = tp.AxisBundleSpec(d2_fixture(), 1, "+", np.array([0.1]), probes=4)
    with pytest.raises(tp.PipelineError):
        tp.build_axis_bundle(spec)


@settings(max_examples=20)
@given(st.lists(st.tuples(st.integers(0, 12), st.integers(-5, 5).filter(bool)), min_size=1, max_size=3,
                unique_by=lambda t: t[0]),
       st.integers(1, 4))
def test_fit_puiseux_recovers_series(terms, N):
    p = PuiseuxPoly({q: c for q, c in terms}, N)
    xs = tp.default_ladder(1.0, 24)
    fit, ok = tp.fit_puiseux(xs, p.evaluate(xs))
    assert ok
    assert np.allclose(fit.evaluate(xs), p.evaluate(xs), rtol=1e-5, atol=1e-9 * np.abs(p.evaluate(xs)).max())


def test_validation_errors():
    nf = tp.xy_fixture()
    nf.strips = {1: tp.StripSystem(1, (0, 0))}
    with pytest.raises(tp.PipelineError):
        nf.validate()
    nf = tp.xy_fixture()
    nf.curves = {5: []}
    with pytest.raises(tp.PipelineError):
        nf.validate()


def test_strip_system_from_equations_matches_direct():
    # F_0 - x F_1 = y, 2 F_0 - 2x F_1 = 2y: rank one
    C = lambda X, Y: [[1.0 + 0 * X, -1.0 * X], [2.0 + 0 * X, -2.0 * X]]
    g = lambda X, Y: [Y, 2.0 * Y]
    samples = [(x, 0.3 * x) for x in np.linspace(0.1, 1, 7)]
    st_ = tp.strip_system_from_equations(C, g, 2, samples)
    assert st_.k == 1
    sp = JetSpace(2, 1)
    X, Y = JetArray.variable(sp, [0.5], 0), JetArray.variable(sp, [0.2], 1)
    A, phi = st_.A(X, Y), st_.phi(X, Y)
    # F_perm0 + A F_perm1 = phi must reproduce F_0 - x F_1 = y
    if st_.perm[0] == 0:
        assert np.allclose(A[0][0].c, (-1.0 * X).c) and np.allclose(phi[0].c, Y.c)
    else:
        assert np.allclose(A[0][0].c, (-1.0 / X).c) and np.allclose(phi[0].c, (-1.0 * Y / X).c)


def test_certify_strip_bounds():
    rep = tp.certify_strip_bounds(d2_fixture())
    # |A| = x <= 0.5 on the default ladder and |dA| dist <= x/4
    assert rep["ok"] and rep["constants"][1] == pytest.approx(0.5, rel=1e-9)


def test_section_against_sampled_bundle(xy_run):
    from artifact.bundles import AffineFiber, SampledBundle
    _, _, sec = xy_run
    space = JetSpace(2, 1)
    pts = np.array([[x, x / 2] for x in tp.default_ladder(1.0, 6)])
    fibers = [AffineFiber(space, tuple(p), [p[0] * p[1], p[1], p[0]], [[0, 1, 0], [0, 0, 1]]) for p in pts]
    rep = tp.verify_section(SampledBundle(space, pts, fibers), sec.components)
    assert rep.ok
    fibers = [AffineFiber(space, tuple(p), [1 + p[0] * p[1], 0, 0], [[0, 1, 0], [0, 0, 1]]) for p in pts]
    assert not tp.verify_section(SampledBundle(space, pts, fibers), sec.components).ok


def test_rank_anomaly_shrinks_delta():
    """A curve row that degenerates at one abscissa a: F(x, x/2) (x - a) = (x - a) x^2 / 2."""
    xs = tp.default_ladder(1.0)
    a = float(xs[4])
    nf = tp.xy_fixture()
    nf.curves = {1: [tp.CurveRow({(0, 0): PuiseuxPoly({0: -a, 1: 1})}, PuiseuxPoly({2: -a / 2, 3: 0.5}))]}
    _, sel, sec = tp.run_pipeline(nf)
    assert [an["index"] for an in sel.anomalies] == [4]
    assert sel.delta < a and sel.xs.max() < sel.delta
    assert sec.ok
    x = tp.default_ladder(sel.delta)
    assert np.max(np.abs(sec.components[0](x, x / 2) - x * x / 2)) <= 1e-6
    _, clean, _ = tp.run_pipeline(tp.xy_fixture())
    assert clean.anomalies == [] and clean.delta is None
