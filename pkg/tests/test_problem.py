import numpy as np
import pytest
import sympy
from hypothesis import given, settings, strategies as st

from obsgain.poly import Polynomial, parse_polynomial
from obsgain.problem import ObserverProblem, augmented_field, error_dynamics, make_registry
from obsgain.semialg import make_ball, make_box

from conftest import bilinear_problem, linear_problem, planar_problem, scalar_problem


def sympy_error_dynamics(f, h, n, m):
    """Reference g built by direct symbolic substitution."""
    x = sympy.symbols(f"x1:{n + 1}")
    e = sympy.symbols(f"e1:{n + 1}")
    l = sympy.Matrix(n, m, sympy.symbols(f"l1:{n * m + 1}"))
    shift = dict(zip(x, [xi - ei for xi, ei in zip(x, e)]))
    F = [sympy.sympify(s, locals=dict(zip(map(str, x), x))) for s in f]
    H = [sympy.sympify(s, locals=dict(zip(map(str, x), x))) for s in h]
    dh = sympy.Matrix([hj - hj.subs(shift, simultaneous=True) for hj in H])
    return [sympy.expand(F[i] - F[i].subs(shift, simultaneous=True) - (l.row(i) * dh)[0])
            for i in range(n)]


def as_poly(expr, reg):
    syms = sympy.symbols(reg.names)
    p = sympy.Poly(expr, *syms)
    return Polynomial({tuple(int(a) for a in mono): float(c) for mono, c in p.terms()}, reg)


def test_scalar_error_dynamics():
    p = scalar_problem()
    (g,) = error_dynamics(p)
    assert g == parse_polynomial("-e1 - l1*e1", p.registry)


def test_linear_error_dynamics():
    p = linear_problem()
    reg = p.registry
    g = error_dynamics(p)
    assert g[0] == parse_polynomial("-(1 + l1)*e1 - 3*e2", reg)
    assert g[1] == parse_polynomial("-2*e1 - 6*e2 - l2*e1", reg)
    oracle = sympy_error_dynamics(["-x1 - 3*x2", "-2*x1 - 6*x2"], ["x1"], 2, 1)
    assert all(gi.allclose(as_poly(o, reg), atol=0) for gi, o in zip(g, oracle))


def test_bilinear_error_dynamics():
    p = bilinear_problem()
    reg = p.registry
    g = error_dynamics(p)
    assert g[0] == parse_polynomial("-e1 + x1*e2 + e1*x2 - e1*e2 - l1*e1", reg)
    assert g[1] == parse_polynomial("-e2 - l2*e1", reg)
    oracle = sympy_error_dynamics(["-x1 + x1*x2", "-x2"], ["x1"], 2, 1)
    assert all(gi == as_poly(o, reg) for gi, o in zip(g, oracle))


def test_zero_drift_field():
    p = planar_problem(["0", "0"])
    phi = augmented_field(p)
    reg = p.registry
    assert [str(q) for q in phi.phi[:2]] == ["0", "0"]
    assert phi.phi[2] == parse_polynomial("-l1*e1", reg)
    assert phi.phi[3] == parse_polynomial("-l2*e1", reg)


def test_scalar_field():
    p = scalar_problem()
    phi = augmented_field(p)
    assert phi.phi == (parse_polynomial("-x1", p.registry),
                       parse_polynomial("-e1 - l1*e1", p.registry))
    assert phi.state_vars == ("x1", "e1")


def test_linear_field_stacks_drift_and_error():
    p = linear_problem()
    phi = augmented_field(p)
    assert phi.phi[:2] == p.f
    assert phi.phi[2:] == error_dynamics(p)
    assert phi.degree == 2


def test_horizon_scales_field_and_time():
    reg = make_registry(1, 1)
    X = make_box(reg, ["x1"], [-1], [1])
    E = make_box(reg, ["e1"], [-1], [1])
    ET = make_box(reg, ["e1"], [-0.1], [0.1])
    L = make_box(reg, ["l1"], [-1], [1])
    p = ObserverProblem(reg, [parse_polynomial("t*x1", reg)], [parse_polynomial("x1", reg)],
                        X, E, ET, L, T=2.0)
    phi = augmented_field(p)
    assert phi.phi[0] == parse_polynomial("4*t*x1", reg)
    assert phi.horizon == 2.0


def test_target_must_lie_in_error_set():
    with pytest.raises(ValueError, match="not contained"):
        ObserverProblem.from_strings(
            ["-x1"], ["x1"],
            lambda r: make_box(r, ["x1"], [-1], [1]),
            lambda r: make_box(r, ["e1"], [-0.01], [0.01]),
            lambda r: make_box(r, ["e1"], [-0.05], [0.05]),
            lambda r: make_box(r, ["l1"], [-1], [1]))


def test_output_may_not_depend_on_error():
    reg = make_registry(1, 1)
    box = make_box(reg, ["x1"], [-1], [1])
    with pytest.raises(ValueError, match="h\\[0\\]"):
        ObserverProblem(reg, [parse_polynomial("-x1", reg)], [parse_polynomial("e1", reg)],
                        box, make_box(reg, ["e1"], [-1], [1]), make_box(reg, ["e1"], [-.1], [.1]),
                        make_box(reg, ["l1"], [-1], [1]))


def test_sets_must_match_variables():
    with pytest.raises(ValueError, match="set E"):
        ObserverProblem.from_strings(
            ["-x1"], ["x1"],
            lambda r: make_box(r, ["x1"], [-1], [1]),
            lambda r: make_box(r, ["x1"], [-1], [1]),
            lambda r: make_box(r, ["e1"], [-0.05], [0.05]),
            lambda r: make_box(r, ["l1"], [-1], [1]))


def test_gain_ordering_is_row_major():
    reg = make_registry(2, 2)
    assert reg.names[-4:] == ("l1", "l2", "l3", "l4")


def test_fingerprint_is_stable_and_sensitive():
    assert linear_problem().fingerprint() == linear_problem().fingerprint()
    assert linear_problem().fingerprint() != bilinear_problem().fingerprint()


# -- properties ------------------------------------------------------------------
def test_error_vanishes_at_zero_error():
    rng = np.random.default_rng(0)
    for p in (scalar_problem(), linear_problem(), bilinear_problem()):
        g = error_dynamics(p)
        pts = rng.uniform(-3, 3, size=(500, len(p.registry)))
        pts[:, p.registry.indices(p.e_vars)] = 0.0
        for gi in g:
            assert np.max(np.abs(gi.evaluate_many(pts))) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 2), st.integers(0, 2 ** 31))
def test_linear_systems_give_injection_matrix(n, m, seed):
    rng = np.random.default_rng(seed)
    A = np.round(rng.normal(size=(n, n)), 3)
    C = np.round(rng.normal(size=(m, n)), 3)
    reg = make_registry(n, m)
    xs = [reg.var(f"x{i + 1}") for i in range(n)]
    es = [reg.var(f"e{i + 1}") for i in range(n)]
    f = [sum((xs[j].scale(A[i, j]) for j in range(n)), reg.zero()) for i in range(n)]
    h = [sum((xs[j].scale(C[k, j]) for j in range(n)), reg.zero()) for k in range(m)]
    X = make_ball(reg, [f"x{i + 1}" for i in range(n)], [0] * n, 1)
    E = make_ball(reg, [f"e{i + 1}" for i in range(n)], [0] * n, 1)
    ET = make_ball(reg, [f"e{i + 1}" for i in range(n)], [0] * n, 0.1)
    L = make_ball(reg, [f"l{k + 1}" for k in range(n * m)], [0] * (n * m), 1)
    p = ObserverProblem(reg, f, h, X, E, ET, L)
    g = error_dynamics(p)
    gains = p.gain_matrix_names()
    for i in range(n):
        expected = reg.zero()
        for j in range(n):
            coef = reg.const(A[i, j])
            for k in range(m):
                coef = coef - reg.var(gains[i, k]).scale(C[k, j])
            expected = expected + coef * es[j]
        assert (g[i] - expected).max_abs_coef() <= 1e-12
        assert g[i].degree <= max(q.degree for q in f) + 1
        if not g[i].is_zero():
            assert g[i].degree_in(p.l_vars) <= 1


@pytest.mark.parametrize("factory", [scalar_problem, linear_problem, bilinear_problem])
def test_error_degree_bounds(factory):
    p = factory()
    fdeg = max(q.degree for q in p.f)
    for gi in error_dynamics(p):
        assert gi.degree_in(p.state_vars) <= fdeg
        assert gi.degree_in(p.l_vars) == 1
