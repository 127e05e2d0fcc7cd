"""Command line front end: fixture files in, JSON/text reports out.

Exit codes: 0 pass, 2 mathematical failure (empty fibers, failed
certification, no section), 1 usage or input error.
"""

from __future__ import annotations

import argparse
import ast
import json
import math
import operator
import os
import re
import sys
import time
from dataclasses import dataclass
from fractions import Fraction
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import bundles, elimination, hellyselect, patching, tracepipeline
from .jetcore import JetArray, JetSpace
from .puiseux import CurveLadder, PuiseuxPoly

KINDS = ("sampled-bundle", "param-system", "seminorm-family", "wedge-normal-form",
         "field-piece", "cusp-region")
EXIT_OK, EXIT_USAGE, EXIT_FAIL = 0, 1, 2


class SpecError(ValueError):
    def __init__(self, msg, path=(), line=None, col=None, source=None):
        self.msg = msg
        self.path = tuple(path)
        self.line = line
        self.col = col
        self.source = source
        super().__init__(self.__str__())

    def __str__(self):
        where = self.source or "<input>"
        if self.line is not None:
            where += f":{self.line}:{self.col}"
        loc = "/".join(str(p) for p in self.path)
        return f"{where}: {self.msg}" + (f" (at {loc})" if loc else "")


@dataclass
class FixtureSpec:
    kind: str
    data: dict
    source: str = "<input>"

    @property
    def seed(self):
        env = os.environ.get("WS_SEED")
        if env is not None:
            return int(env)
        return int(self.data.get("seed", 0))


# ------------------------------------------------------------------ emission

def canonical_dumps(data):
    return json.dumps(data, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def emit_spec(spec):
    return canonical_dumps(spec.data)


# ------------------------------------------------------------------- parsing

def _locate(text, path):
    """Line and column (1-based) of the node at ``path`` in a JSON text."""
    try:
        node = yaml.compose(text)
    except yaml.YAMLError:
        return None, None
    for key in path:
        if node is None:
            break
        if isinstance(node, yaml.MappingNode):
            nxt = None
            for k, v in node.value:
                if k.value == str(key):
                    nxt = v
                    break
            node = nxt
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
        else:
            break
    if node is None:
        return None, None
    return node.start_mark.line + 1, node.start_mark.column + 1


_DECIMAL = re.compile(r"^-?\d+(\.\d+)?([eE][-+]?\d+)?$")
_RATIONAL = re.compile(r"^-?\d+/\d+$")


def _need(d, key, path, typ=None):
    if not isinstance(d, dict) or key not in d:
        raise SpecError(f"missing field {key!r}", path)
    v = d[key]
    if typ is not None and not isinstance(v, typ) or isinstance(v, bool) and typ is not bool:
        raise SpecError(f"field {key!r} has the wrong type", tuple(path) + (key,))
    return v


def parse_series(terms, path):
    """[{num, den, coeff}] with strictly increasing exponents -> PuiseuxPoly."""
    if not isinstance(terms, list):
        raise SpecError("a Puiseux series is a list of terms", path)
    out = []
    last = None
    for i, t in enumerate(terms):
        p = tuple(path) + (i,)
        num = _need(t, "num", p, int)
        den = _need(t, "den", p, int)
        coeff = _need(t, "coeff", p, str)
        if den < 1 or math.gcd(num, den) != 1:
            raise SpecError("non-canonical Puiseux term: num/den must be reduced with den >= 1", p)
        if not (_DECIMAL.match(coeff) or _RATIONAL.match(coeff)):
            raise SpecError(f"coefficient {coeff!r} is not a decimal or rational string", p + ("coeff",))
        c = Fraction(coeff)
        if c == 0:
            raise SpecError("non-canonical Puiseux term: zero coefficient", p + ("coeff",))
        e = Fraction(num, den)
        if last is not None and e <= last:
            raise SpecError("non-canonical Puiseux series: exponents must increase strictly", p)
        last = e
        out.append((e, c))
    return PuiseuxPoly.from_terms(out)


def series_terms(p):
    """Canonical term list for a PuiseuxPoly with exact coefficients."""
    out = []
    for e, c in p.terms():
        c = Fraction(c)
        s = str(c.numerator) if c.denominator == 1 else f"{c.numerator}/{c.denominator}"
        out.append({"num": e.numerator, "den": e.denominator, "coeff": s})
    return out


_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
           ast.Div: operator.truediv, ast.Pow: operator.pow}


def compile_expr(text, names, path=()):
    """Rational expression over the given variable names with integer powers.

    Returns a function of an environment dict mapping names to jet carriers.
    """
    if not isinstance(text, str):
        raise SpecError("expression must be a string", path)
    try:
        tree = ast.parse(text, mode="eval")
    except SyntaxError as exc:
        raise SpecError(f"cannot parse expression {text!r}: {exc.msg}", path) from None

    def check(node):
        if isinstance(node, ast.Expression):
            return check(node.body)
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            if isinstance(node.op, ast.Pow):
                r = node.right
                if isinstance(r, ast.UnaryOp) and isinstance(r.op, ast.USub):
                    r = r.operand
                if not (isinstance(r, ast.Constant) and isinstance(r.value, int)):
                    raise SpecError(f"only integer powers are allowed in {text!r}", path)
            check(node.left)
            check(node.right)
            return
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            return check(node.operand)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) \
                and not isinstance(node.value, bool):
            return
        if isinstance(node, ast.Name):
            if node.id not in names:
                raise SpecError(f"unknown variable {node.id!r} in {text!r}", path)
            return
        raise SpecError(f"unsupported construct in expression {text!r}", path)

    check(tree)

    def ev(node, env):
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](ev(node.left, env), ev(node.right, env))
        if isinstance(node, ast.UnaryOp):
            v = ev(node.operand, env)
            return -v if isinstance(node.op, ast.USub) else v
        if isinstance(node, ast.Constant):
            return float(node.value) if isinstance(node.value, float) else node.value
        return env[node.id]

    body = tree.body
    return lambda env: ev(body, env)


def _var_names(n):
    base = {1: ["x"], 2: ["x", "y"], 3: ["x", "y", "z"]}.get(n, [])
    return base, [f"x{i + 1}" for i in range(n)]


def _env_for(n, variables):
    base, idx = _var_names(n)
    env = dict(zip(base, variables))
    env.update(zip(idx, variables))
    return env


def _as_jet(v, like):
    if isinstance(v, JetArray):
        return v
    return JetArray.const(like.space, float(v), like.npts)


def parse_text(text, source="<input>"):
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecError(f"invalid JSON: {exc.msg}", (), exc.lineno, exc.colno, source) from None
    try:
        spec = _validate(data, source)
    except SpecError as exc:
        line, col = _locate(text, exc.path)
        raise SpecError(exc.msg, exc.path, line, col, source) from None
    return spec


def parse_spec(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise SpecError(f"cannot read file: {exc}", (), None, None, str(path)) from None
    return parse_text(text, str(path))


def _validate(data, source):
    if not isinstance(data, dict):
        raise SpecError("top level must be an object")
    kind = _need(data, "kind", (), str)
    if kind not in KINDS:
        raise SpecError(f"unknown kind {kind!r}", ("kind",))
    if "seed" in data and (not isinstance(data["seed"], int) or isinstance(data["seed"], bool)):
        raise SpecError("seed must be an integer", ("seed",))
    spec = FixtureSpec(kind, data, source)
    # building the model object is the schema check
    BUILDERS[kind](spec)
    return spec


# ------------------------------------------------------------ model builders

def _dims(d, path=()):
    out = []
    for k in ("n", "m", "D"):
        v = _need(d, k, path, int)
        if v < (1 if k != "m" else 0):
            raise SpecError(f"{k} out of range", tuple(path) + (k,))
        out.append(v)
    return out


def to_bundle(spec):
    d = spec.data
    n, m, D = _dims(d)
    space = JetSpace(n, m, D)
    dim = space.D * space.dim
    pts = _need(d, "points", (), list)
    if not pts:
        raise SpecError("a bundle needs at least one point", ("points",))
    coords, fibers, seen = [], [], {}
    for i, p in enumerate(pts):
        path = ("points", i)
        x = _need(p, "x", path, list)
        if len(x) != n or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in x):
            raise SpecError(f"point must have {n} numeric coordinates", path + ("x",))
        key = tuple(float(v) for v in x)
        if key in seen:
            raise SpecError(f"duplicate point {list(key)} (also entry {seen[key]})", path + ("x",))
        seen[key] = i
        fib = _need(p, "fiber", path, dict)
        typ = _need(fib, "type", path + ("fiber",), str)
        fp = path + ("fiber",)
        if typ == "full":
            f = bundles.AffineFiber.full(space, key)
        elif typ == "empty":
            f = bundles.AffineFiber.empty(space, key)
        elif typ == "affine":
            off = _vector(_need(fib, "offset", fp, list), dim, fp + ("offset",))
            gens = [_vector(g, dim, fp + ("generators", j))
                    for j, g in enumerate(_need(fib, "generators", fp, list))]
            f = bundles.AffineFiber(space, key, off, np.array(gens).reshape(-1, dim))
        elif typ == "constraints":
            rows = []
            for j, r in enumerate(_need(fib, "rows", fp, list)):
                rp = fp + ("rows", j)
                rows.append((_vector(_need(r, "functional", rp, list), dim, rp + ("functional",)),
                             _number(_need(r, "rhs", rp), rp + ("rhs",))))
            f = bundles.fiber_from_constraints(rows, space, key)
        else:
            raise SpecError(f"unknown fiber type {typ!r}", fp + ("type",))
        coords.append(key)
        fibers.append(f)
    return bundles.SampledBundle(space, np.array(coords), fibers)


def _number(v, path):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise SpecError("expected a number", path)
    return float(v)


def _vector(v, dim, path):
    if not isinstance(v, list) or len(v) != dim:
        raise SpecError(f"expected a list of {dim} numbers", path)
    return np.array([_number(a, tuple(path) + (i,)) for i, a in enumerate(v)])


def to_system(spec, samples=None):
    d = spec.data
    N = _need(d, "N", (), int)
    M = _need(d, "M", (), int)
    nvar = _need(d, "vars", (), int)
    names = _var_names(nvar)[0] + _var_names(nvar)[1]
    C = _need(d, "coeffs", (), list)
    if len(C) != N or any(not isinstance(r, list) or len(r) != M for r in C):
        raise SpecError(f"coeffs must be an {N} x {M} array of expressions", ("coeffs",))
    Cf = [[compile_expr(e, names, ("coeffs", i, j)) for j, e in enumerate(r)] for i, r in enumerate(C)]
    g = _need(d, "rhs", (), list)
    if len(g) != N:
        raise SpecError(f"rhs must have {N} expressions", ("rhs",))
    gf = [compile_expr(e, names, ("rhs", i)) for i, e in enumerate(g)]
    sp = JetSpace(nvar, 0)

    def env(p):
        return _env_for(nvar, [JetArray.const(sp, float(v), 1) for v in p])

    def val(f, p):
        v = f(env(p))
        return v.value[0] if isinstance(v, JetArray) else float(v)

    sysm = elimination.ParamLinearSystem(N, M, lambda p: [[val(f, p) for f in r] for r in Cf],
                                         lambda p: [val(f, p) for f in gf])
    if samples is None:
        if "samples" in d:
            pts = _need(d, "samples", (), list)
            samples = [tuple(_vector(p, nvar, ("samples", i))) for i, p in enumerate(pts)]
        else:
            count = _need(d, "count", (), int) if "count" in d else 50
            if count < 1:
                raise SpecError("count out of range", ("count",))
            samples = _draw_samples(spec, nvar, count)
    return sysm, samples


def _draw_samples(spec, nvar, count):
    box = spec.data.get("domain", [[-1.0, 1.0]] * nvar)
    if not isinstance(box, list) or len(box) != nvar:
        raise SpecError("domain must list one [lo, hi] pair per variable", ("domain",))
    lo = np.array([_number(b[0], ("domain", i, 0)) for i, b in enumerate(box)])
    hi = np.array([_number(b[1], ("domain", i, 1)) for i, b in enumerate(box)])
    rng = np.random.default_rng(spec.seed)
    return [tuple(p) for p in lo + (hi - lo) * rng.random((count, nvar))]


def to_family(spec):
    d = spec.data
    dim = _need(d, "dim", (), int)
    mode = d.get("mode", "l2")
    def matrices(key, mats):
        out = []
        for i, M in enumerate(mats):
            if not isinstance(M, list) or not M:
                raise SpecError("member must be a non-empty matrix", (key, i))
            out.append(np.array([_vector(r, dim, (key, i, j)) for j, r in enumerate(M)]))
        return out

    members = matrices("members", _need(d, "members", (), list))
    anchors = matrices("anchors", _need(d, "anchors", (), list)) if "anchors" in d else []
    if not members:
        raise SpecError("family is empty", ("members",))
    try:
        return hellyselect.SeminormFamily(dim, members, mode, anchors)
    except hellyselect.SelectionError as exc:
        raise SpecError(str(exc), ("members",)) from None


def to_field(spec):
    """field-piece: components are expressions in the coordinates."""
    d = spec.data
    n = _need(d, "n", (), int) if "n" in d else 2
    if n < 1:
        raise SpecError("n out of range", ("n",))
    names = _var_names(n)[0] + _var_names(n)[1]
    comps = d.get("components")
    if comps is None:
        comps = [_need(d, "expr", (), str)]
        base = ("expr",)
    else:
        base = ("components",)
    if not isinstance(comps, list) or not comps:
        raise SpecError("components must be a non-empty list of expressions", base)
    fns = [compile_expr(e, names, base + ((i,) if base == ("components",) else ())) for i, e in enumerate(comps)]
    return n, fns


def field_pieces(spec):
    n, fns = to_field(spec)
    if n != 2:
        raise SpecError("a planar field needs n = 2", ("n",))
    tag = spec.data.get("tag", "+")
    out = []
    for f in fns:
        def func(X, Y, f=f):
            return _as_jet(f(_env_for(2, [X, Y])), X)
        out.append(patching.FieldPiece(func, tag, name=spec.source))
    return out


def to_region(spec):
    d = spec.data
    lo = parse_series(_need(d, "psi_minus", (), list), ("psi_minus",))
    hi = parse_series(_need(d, "psi_plus", (), list), ("psi_plus",))
    delta = _number(d.get("delta", 1.0), ("delta",))
    m = _need(d, "m", (), int)
    if m < 0:
        raise SpecError("m must be non-negative", ("m",))
    region = patching.CuspRegion(lo, hi, delta)
    d2 = region.validate()
    if d2 <= 0:
        raise SpecError("psi_minus < psi_plus <= x fails near 0", ("psi_plus",))
    region.delta = d2
    return region, m


def to_normal_form(spec):
    d = spec.data
    D = _need(d, "D", (), int)
    m = _need(d, "m", (), int)
    delta = _number(d.get("delta", 1.0), ("delta",))
    curves = [parse_series(c, ("curves", i)) for i, c in enumerate(_need(d, "curves", (), list))]
    if len(curves) < 2:
        raise SpecError("need at least the curves 0 and x", ("curves",))
    K = len(curves) - 1
    names = ["x", "y"] + [f"psi{s}" for s in range(K + 1)]
    strips = {}
    for i, st in enumerate(d.get("strips", [])):
        p = ("strips", i)
        s = _need(st, "s", p, int)
        k = _need(st, "k", p, int)
        perm = tuple(_need(st, "perm", p, list))
        if sorted(perm) != list(range(D)) or not 0 <= k <= D or not 1 <= s <= K or s in strips:
            raise SpecError("bad strip index, depth or permutation", p)
        A = [[compile_expr(e, names, p + ("A", a, b)) for b, e in enumerate(row)]
             for a, row in enumerate(st.get("A", [["0"] * (D - k)] * k))]
        phi = [compile_expr(e, names, p + ("phi", a)) for a, e in enumerate(st.get("phi", ["0"] * k))]
        if len(A) != k or any(len(r) != D - k for r in A) or len(phi) != k:
            raise SpecError("strip coefficient shapes do not match k and D", p)
        strips[s] = tracepipeline.StripSystem(k, perm, _strip_eval(A, curves, nested=True),
                                              _strip_eval(phi, curves, nested=False))
    rows = {}
    for i, r in enumerate(d.get("curve_rows", [])):
        p = ("curve_rows", i)
        s = _need(r, "s", p, int)
        if not 0 <= s <= K:
            raise SpecError("curve index out of range", p + ("s",))
        theta = {}
        for j, t in enumerate(_need(r, "theta", p, list)):
            tp = p + ("theta", j)
            jj, ll = _need(t, "j", tp, int), _need(t, "l", tp, int)
            if not (0 <= jj < D and 0 <= ll <= m) or (jj, ll) in theta:
                raise SpecError("bad or repeated (j, l) in curve row", tp)
            theta[(jj, ll)] = parse_series(_need(t, "series", tp, list), tp + ("series",))
        g = parse_series(_need(r, "g", p, list), p + ("g",))
        rows.setdefault(s, []).append(tracepipeline.CurveRow(theta, g))
    nf = tracepipeline.WedgeNormalForm(CurveLadder(curves, delta), D, m, strips, rows)
    try:
        nf.validate()
    except tracepipeline.PipelineError as exc:
        raise SpecError(str(exc), ("curves",)) from None
    return nf


def _strip_eval(exprs, curves, nested):
    def run(X, Y):
        env = {"x": X, "y": Y}
        for s, c in enumerate(curves):
            env[f"psi{s}"] = c.on_jets(X)
        if nested:
            return [[_as_jet(f(env), X) for f in row] for row in exprs]
        return [_as_jet(f(env), X) for f in exprs]
    return run


def _check_region(spec):
    to_region(spec)


BUILDERS = {
    "sampled-bundle": to_bundle,
    "param-system": lambda s: to_system(s, samples=[]),
    "seminorm-family": to_family,
    "wedge-normal-form": to_normal_form,
    "field-piece": to_field,
    "cusp-region": _check_region,
}


# ----------------------------------------------------------------- fixtures

def fixture_dir():
    return resources.files("artifact") / "fixtures"


def _fiber_constraints(rows):
    return {"type": "constraints", "rows": [{"functional": list(map(float, f)), "rhs": float(r)}
                                            for f, r in rows]}


def kollar_nowak_data(grid=9):
    g = np.linspace(-1.0, 1.0, grid)
    pts = []
    for x1 in g:
        for x2 in g:
            for x3 in g:
                a, b, c = bundles.kollar_nowak_coefficients((x1, x2, x3))
                pts.append({"x": [float(x1), float(x2), float(x3)],
                            "fiber": _fiber_constraints([([a, b], c)])})
    return {"kind": "sampled-bundle", "n": 3, "m": 0, "D": 2, "seed": 0, "points": pts}


def dyadic_data(values, K=40):
    pts = []
    for x in [0.0] + [2.0 ** -k for k in range(K + 1)]:
        pts.append({"x": [x], "fiber": _fiber_constraints([([1.0, 0.0], values(x))])})
    return {"kind": "sampled-bundle", "n": 1, "m": 1, "D": 1, "seed": 0, "points": pts}


def shipped_fixtures():
    """Name -> data for every fixture shipped with the package."""
    def osc(x):
        return 0.0 if x == 0 else (-1) ** int(round(-math.log2(x))) * x

    angles = np.arange(64) * np.pi / 64
    return {
        "kollar_nowak.json": kollar_nowak_data(),
        "square.json": dyadic_data(lambda x: x * x),
        "oscillating.json": dyadic_data(osc),
        "kn_candidate.json": {"kind": "field-piece", "n": 3, "components": ["0", "x1"]},
        "circle_family.json": {"kind": "seminorm-family", "dim": 2, "mode": "l2", "seed": 0,
                               "members": [[[float(np.cos(a)), float(np.sin(a))]] for a in angles]},
        "diag_system.json": {"kind": "param-system", "N": 2, "M": 2, "vars": 1,
                             "coeffs": [["x", "0"], ["0", "x - 1"]], "rhs": ["1", "1"],
                             "samples": [[float(v)] for v in np.linspace(-1.0, 2.0, 13)]},
        "plus_cubic.json": {"kind": "field-piece", "n": 2, "tag": "+", "expr": "y**3"},
        "plus_square.json": {"kind": "field-piece", "n": 2, "tag": "+", "expr": "y**2"},
        "minus_zero.json": {"kind": "field-piece", "n": 2, "tag": "-", "expr": "0"},
        "cusp_region.json": {"kind": "cusp-region", "m": 2, "delta": 1.0, "psi_minus": [],
                             "psi_plus": [{"num": 2, "den": 1, "coeff": "1"}]},
        "xy_wedge.json": {
            "kind": "wedge-normal-form", "D": 1, "m": 1, "delta": 1.0,
            "curves": [[], [{"num": 1, "den": 1, "coeff": "1/2"}], [{"num": 1, "den": 1, "coeff": "1"}]],
            "strips": [],
            "curve_rows": [{"s": 1, "theta": [{"j": 0, "l": 0, "series": [{"num": 0, "den": 1, "coeff": "1"}]}],
                            "g": [{"num": 2, "den": 1, "coeff": "1/2"}]}]},
    }


# ------------------------------------------------------------------ commands

def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.ndarray):
        return _jsonable(o.tolist())
    if isinstance(o, (np.floating, float)):
        v = float(o)
        return v if math.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.bool_,)):
        return bool(o)
    if isinstance(o, PuiseuxPoly):
        return repr(o)
    return o


def cmd_refine(args):
    spec = parse_spec(args.input)
    b = to_bundle(spec)
    params = bundles.RefinementParams(offset_tol=args.tol)
    nb, rep = bundles.iterate_to_stability(b, args.max_iter, params)
    emptied = sorted(set(rep.emptied_points) | {i for i, f in enumerate(nb.fibers) if f.is_empty})
    body = {"command": "refine", "iterations": rep.iterations, "stable": rep.stable,
            "emptied_points": [{"index": i, "x": b.points[i].tolist()} for i in emptied],
            "fiber_dims_before": rep.fiber_dims_before, "fiber_dims_after": rep.fiber_dims_after,
            "refined_points": rep.refined_points, "flagged": rep.flagged}
    return body, EXIT_FAIL if emptied else EXIT_OK


def cmd_eliminate(args):
    spec = parse_spec(args.input)
    sysm, samples = to_system(spec)
    if args.samples is not None:
        samples = _draw_samples(spec, spec.data["vars"], args.samples)
    pieces = elimination.eliminate(sysm, samples)
    rep = elimination.verify_equivalence(sysm, pieces, samples)
    bound = elimination.check_bound(pieces)
    depth = max((p.k for p in pieces), default=0) <= min(sysm.N, sysm.M)
    body = {"command": "eliminate", "samples": len(samples), "bound_ok": bound, "depth_ok": depth,
            "equivalence_ok": rep.ok, "worst_residual": rep.worst_residual, "witness": rep.witness,
            "pieces": [{"k": p.k, "perm": list(p.perm), "points": len(p.points),
                        "consistent_points": int(p.consistent().sum())} for p in pieces]}
    return body, EXIT_OK if rep.ok and bound and depth else EXIT_FAIL


def cmd_helly(args):
    spec = parse_spec(args.input)
    fam = to_family(spec)
    quo, lambdas, H, Q = hellyselect.null_space_reduce(fam)
    sel = hellyselect.select_representatives(quo, samples=args.sphere_samples, seed=spec.seed)
    rep = hellyselect.verify_domination(quo, sel, samples=args.sphere_samples, seed=spec.seed + 1)
    body = {"command": "helly", "null_space_dim": int(H.shape[1]), "lambdas": lambdas,
            "selected": sel.indices, "L": sel.L, "C": sel.C, "verified": rep.ok,
            "worst_ratio": rep.worst_ratio, "witness": rep.witness, "rank_flags": quo.flags}
    return body, EXIT_OK if rep.ok else EXIT_FAIL


def cmd_patch(args):
    plus = parse_spec(args.plus)
    minus = parse_spec(args.minus)
    region_spec = parse_spec(args.region)
    for s, kind in ((plus, "field-piece"), (minus, "field-piece"), (region_spec, "cusp-region")):
        if s.kind != kind:
            raise SpecError(f"expected a {kind} file", ("kind",), source=s.source)
    region, m = to_region(region_spec)
    m = args.m if args.m is not None else m
    Fp, Fm = field_pieces(plus)[0], field_pieces(minus)[0]
    profile = patching.make_cutoff(args.r if args.r else 2 * (m + 1), m)
    comp = patching.compatibility_check(Fp, Fm, region, m)
    body = {"command": "patch", "m": m, "compatible": comp.ok, "compatibility_exponents": comp.exponents,
            "failing_l": comp.failing}
    if not comp.ok and not args.force:
        body["patched"] = False
        return body, EXIT_FAIL
    F = patching.patch_cusp(Fp, Fm, region, profile, m, force=args.force)
    cm = patching.cm_verify(F, m)
    dprime = F.delta if cm.ok else patching.certified_delta(F, m)[0]
    body.update({"patched": True, "cm_ok": cm.ok, "certified_delta": dprime, "cm_exponents": {str(k): v for k, v in cm.exponents.items()},
                 "cm_failures": cm.failures[:5]})
    return body, EXIT_OK if comp.ok and cm.ok else EXIT_FAIL


def cmd_synthesize(args):
    spec = parse_spec(args.input)
    if spec.kind != "wedge-normal-form":
        raise SpecError("synthesize needs a wedge-normal-form file", ("kind",), source=spec.source)
    nf = to_normal_form(spec)
    delta = nf.validate()
    xs = tracepipeline.default_ladder(delta, args.ladder)
    sysm = tracepipeline.assemble_constraints(nf, xs=xs)
    sel = tracepipeline.solve_selection(sysm)
    body = {"command": "synthesize", "ladder": sel.xs, "F_min": sel.F_min, "F_min_exponent": sel.exponent,
            "section_exists": sel.exists, "nonexistence": sel.nonexistence, "row_counts": sysm.counts,
            "anomalies": sel.anomalies, "delta": delta if sel.delta is None else sel.delta}
    if not sel.exists:
        return body, EXIT_FAIL
    try:
        sec = tracepipeline.synthesize_section(nf, sel, tol=args.tol)
    except tracepipeline.PipelineError as exc:
        body["synthesis_error"] = str(exc)
        return body, EXIT_FAIL
    body.update({"fits": [repr(p) for p in sel.fits], "fit_ok": sel.fit_ok,
                 "residuals": sec.verification.residuals, "verification_ok": sec.verification.ok,
                 "verification_failures": sec.verification.failures,
                 "cm_ok": [r.ok for r in sec.cm_reports],
                 "cm_exponents": [{str(k): v for k, v in r.exponents.items()} for r in sec.cm_reports]})
    return body, EXIT_OK if sec.ok else EXIT_FAIL


def cmd_check(args):
    bspec = parse_spec(args.bundle)
    fspec = parse_spec(args.field)
    b = to_bundle(bspec)
    n, fns = to_field(fspec)
    if n != b.space.n or len(fns) != b.space.D:
        raise SpecError("field dimensions do not match the bundle", ("components",), source=fspec.source)
    sp = JetSpace(n, b.space.m)
    X = [JetArray.variable(sp, b.points[:, k], k) for k in range(n)]
    env = _env_for(n, X)
    comps = [_as_jet(f(env), X[0]) for f in fns]
    vecs = np.concatenate([c.c for c in comps], axis=0).T
    res = bundles.section_distances(b, vecs)
    bad = np.nonzero(~(res <= args.tol))[0]
    body = {"command": "check", "points": len(res), "worst_residual": float(np.max(res)),
            "failing_points": len(bad), "tol": args.tol,
            "residuals": [{"x": b.points[i].tolist(), "residual": float(res[i])} for i in range(len(res))]}
    return body, EXIT_OK if bad.size == 0 else EXIT_FAIL


def _text(body, code, elapsed):
    lines = [f"{body['command']}: {'PASS' if code == EXIT_OK else 'FAIL'} (exit {code}, {elapsed:.2f}s)"]
    for k, v in body.items():
        if isinstance(v, list) and len(v) > 12:
            lines.append(f"  {k}: [{len(v)} entries]")
            continue
        if k == "command":
            continue
        s = json.dumps(_jsonable(v), sort_keys=True)
        lines.append(f"  {k}: {s if len(s) < 200 else s[:197] + '...'}")
    return "\n".join(lines)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser():
    p = _Parser(prog="wsx", description="Jet bundles, Glaeser refinement and planar section synthesis.")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    def common(q):
        q.add_argument("--out", help="write the JSON report here")
        q.add_argument("--json", action="store_true", help="print the JSON report instead of text")
        return q

    q = common(sub.add_parser("refine", help="iterate Glaeser refinement on a sampled bundle"))
    q.add_argument("--input", required=True)
    q.add_argument("--max-iter", type=int, default=10)
    q.add_argument("--tol", type=float, default=1e-9)
    q.set_defaults(run=cmd_refine)
    q = common(sub.add_parser("eliminate", help="parametric elimination with equivalence check"))
    q.add_argument("--input", required=True)
    q.add_argument("--samples", type=int)
    q.set_defaults(run=cmd_eliminate)
    q = common(sub.add_parser("helly", help="select dominating seminorms"))
    q.add_argument("--input", required=True)
    q.add_argument("--sphere-samples", type=int, default=10_000)
    q.set_defaults(run=cmd_helly)
    q = common(sub.add_parser("patch", help="patch two planar fields across a cusp strip"))
    q.add_argument("--plus", required=True)
    q.add_argument("--minus", required=True)
    q.add_argument("--region", required=True)
    q.add_argument("--m", type=int)
    q.add_argument("--r", type=int, help="cutoff smoothness (default 2(m+1))")
    q.add_argument("--force", action="store_true", help="patch even if the pieces are incompatible")
    q.set_defaults(run=cmd_patch)
    q = common(sub.add_parser("synthesize", help="run the wedge pipeline"))
    q.add_argument("--input", required=True)
    q.add_argument("--ladder", type=int, default=24)
    q.add_argument("--tol", type=float, default=1e-6)
    q.set_defaults(run=cmd_synthesize)
    q = common(sub.add_parser("check", help="distance of a candidate field's jets to a bundle"))
    q.add_argument("--bundle", required=True)
    q.add_argument("--field", required=True)
    q.add_argument("--tol", type=float, default=1e-8)
    q.set_defaults(run=cmd_check)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    t0 = time.perf_counter()
    try:
        body, code = args.run(args)
    except SpecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    body = _jsonable(body)
    body["status"] = "pass" if code == EXIT_OK else "fail"
    report = canonical_dumps(body)
    if args.out:
        try:
            Path(args.out).write_text(report, encoding="utf-8")
        except OSError as exc:
            print(f"error: cannot write report: {exc}", file=sys.stderr)
            return EXIT_USAGE
    print(report if args.json else _text(body, code, time.perf_counter() - t0), end="" if args.json else "\n")
    return code
