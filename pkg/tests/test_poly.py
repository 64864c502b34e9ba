import math

import pytest
import sympy
from hypothesis import given, settings, strategies as st

from obsgain.poly import (Polynomial, PolynomialParseError, RegistryMismatchError,
                          UnknownVariableError, VariableRegistry, differentiate, evaluate,
                          monomial_basis, parse_polynomial, poly_arith, substitute)

REG2 = VariableRegistry(["x1", "x2"])
REG4 = VariableRegistry(["x1", "x2", "e1", "e2"])
FULL = VariableRegistry(["t", "x1", "x2", "e1", "e2", "l1", "l2"])


def P(text, reg=REG4):
    return parse_polynomial(text, reg)


def to_sympy(p: Polynomial):
    syms = sympy.symbols(p.registry.names)
    return sum(sympy.Float(c, 30) * sympy.Mul(*[s ** a for s, a in zip(syms, m)])
               for m, c in p.items()) if len(p) else sympy.Integer(0)


def sympy_coeffs(expr, reg):
    syms = sympy.symbols(reg.names)
    poly = sympy.Poly(sympy.expand(expr), *syms)
    return {tuple(int(a) for a in m): float(c) for m, c in poly.terms() if c != 0}


# -- registry -------------------------------------------------------------------
def test_registry_rejects_duplicates():
    with pytest.raises(ValueError):
        VariableRegistry(["x1", "x1"])


def test_registry_order_is_fixed():
    reg = VariableRegistry(["b", "a"])
    assert reg.names == ("b", "a")
    assert reg.index("a") == 1


def test_zero_tolerance_pruning():
    p = Polynomial({(1, 0): 1e-15, (0, 1): 2.0}, REG2)
    assert dict(p.items()) == {(0, 1): 2.0}


def test_degree_of_zero_is_zero():
    assert REG2.zero().degree == 0


# -- parsing --------------------------------------------------------------------
def test_parse_zero():
    assert P("0").is_zero()


def test_parse_linear_drift():
    p = parse_polynomial("-x1 - 3*x2", REG2)
    assert dict(p.items()) == {(1, 0): -1.0, (0, 1): -3.0}


def test_parse_product_matches_symbolic_expansion():
    p = P("(x1 - e1)*(x2 - e2)")
    x1, x2, e1, e2 = sympy.symbols("x1 x2 e1 e2")
    assert dict(p.items()) == sympy_coeffs((x1 - e1) * (x2 - e2), REG4)


def test_parse_powers_and_literals():
    p = parse_polynomial("2.5e-1*x1^2 + (x2 + 1)^3", REG2)
    x1, x2 = sympy.symbols("x1 x2")
    assert p.allclose(Polynomial(sympy_coeffs(sympy.Rational(1, 4) * x1 ** 2 + (x2 + 1) ** 3, REG2), REG2))


@pytest.mark.parametrize("text", ["y1 + 1", "x1 + sin"])
def test_parse_unknown_identifier(text):
    with pytest.raises((PolynomialParseError, UnknownVariableError)):
        parse_polynomial(text, REG2)


@pytest.mark.parametrize("text", ["x1^-1", "x1^1.5", "x1^x2"])
def test_parse_bad_exponent(text):
    with pytest.raises(PolynomialParseError):
        parse_polynomial(text, REG2)


@pytest.mark.parametrize("text", ["x1 +", "(x1", "x1 x2", "x1 / 2", ""])
def test_parse_malformed(text):
    with pytest.raises(PolynomialParseError):
        parse_polynomial(text, REG2)


def test_display_round_trip():
    p = P("-0.1*x1^2*e2 + 3*x2 - 7 + e1*e2")
    text = str(p)
    assert parse_polynomial(text, REG4) == p
    assert text == "-7 + 3*x2 + e1*e2 - 0.10000000000000001*x1^2*e2"


# -- arithmetic -----------------------------------------------------------------
def test_add_zero_identity():
    p = P("x1*e2 + 4")
    assert poly_arith(p, REG4.zero(), "add") == p


def test_mul_difference_of_squares():
    a, b = P("x1 + 1"), P("x1 - 1")
    assert poly_arith(a, b, "mul") == P("x1^2 - 1")


def test_scale():
    assert poly_arith(P("x2"), -3, "scale") == P("-3*x2")


def test_registry_mismatch():
    with pytest.raises(RegistryMismatchError):
        poly_arith(P("x1"), parse_polynomial("x1", REG2), "add")


def test_mul_degree_adds():
    a, b = P("x1^2 + e1"), P("x2^3 - 1")
    assert poly_arith(a, b, "mul").degree == 5


# -- calculus / substitution ----------------------------------------------------
def test_derivative_examples():
    reg = VariableRegistry(["t", "x1", "x2", "e1", "e2"])
    assert differentiate(parse_polynomial("t", reg), "t") == reg.const(1)
    assert differentiate(parse_polynomial("e1^2", reg), "e1") == parse_polynomial("2*e1", reg)
    assert differentiate(parse_polynomial("x1*x2 - x1*e2", reg), "x1") == \
        parse_polynomial("x2 - e2", reg)


def test_derivative_unknown_variable():
    with pytest.raises(UnknownVariableError):
        differentiate(P("x1"), "z")


def test_substitute_examples():
    reg = VariableRegistry(["t", "x1", "x2", "e1", "e2"])
    assert substitute(parse_polynomial("t^2", reg), {"t": 0}).is_zero()
    assert substitute(parse_polynomial("x1", reg), {"x1": parse_polynomial("x1 - e1", reg)}) == \
        parse_polynomial("x1 - e1", reg)
    out = substitute(parse_polynomial("x1*x2", reg),
                     {"x1": parse_polynomial("x1 - e1", reg), "x2": parse_polynomial("x2 - e2", reg)})
    assert out == parse_polynomial("x1*x2 - x1*e2 - e1*x2 + e1*e2", reg)


def test_substitute_is_simultaneous():
    p = P("x1 + 2*x2")
    assert substitute(p, {"x1": P("x2"), "x2": P("x1")}) == P("x2 + 2*x1")


def test_substitute_unknown_variable():
    with pytest.raises(UnknownVariableError):
        substitute(P("x1"), {"q": 1.0})


def test_evaluate_examples():
    assert evaluate(REG2.const(1), [5, -2]) == 1
    assert evaluate(parse_polynomial("x1^2 + x2", REG2), [2, 3]) == 7
    x = parse_polynomial("x1", REG2)
    assert evaluate(x - x, [0.3, 0.4]) == 0


def test_evaluate_dimension_mismatch():
    with pytest.raises(ValueError):
        evaluate(P("x1"), [1.0])


# -- monomial bases --------------------------------------------------------------
def test_basis_degree_zero():
    reg = VariableRegistry(["x1"])
    assert monomial_basis(reg, ["x1"], 0) == [(0,)]


def test_basis_graded_lex():
    assert monomial_basis(REG2, ["x1", "x2"], 1) == [(0, 0), (1, 0), (0, 1)]
    assert monomial_basis(REG2, ["x1", "x2"], 2)[3:] == [(2, 0), (1, 1), (0, 2)]


def test_basis_full_registry_count():
    assert len(monomial_basis(FULL, FULL.names, 3)) == 120


@pytest.mark.parametrize("n", range(1, 9))
def test_basis_count_formula(n):
    reg = VariableRegistry([f"v{i}" for i in range(n)])
    for d in range(0, 9 - max(0, n - 4)):
        assert len(monomial_basis(reg, reg.names, d)) == math.comb(n + d, d)


# -- properties -------------------------------------------------------------------
VARS4 = VariableRegistry(["a", "b", "c", "d"])


@st.composite
def polys(draw, reg=VARS4, max_deg=5, max_terms=6):
    n = len(reg)
    terms = {}
    for _ in range(draw(st.integers(0, max_terms))):
        mono = draw(st.lists(st.integers(0, max_deg), min_size=n, max_size=n))
        while sum(mono) > max_deg:
            mono[mono.index(max(mono))] -= 1
        terms[tuple(mono)] = draw(st.floats(-3, 3, allow_nan=False).filter(lambda v: abs(v) > 1e-6))
    return Polynomial(terms, reg)


points = st.lists(st.floats(-1, 1, allow_nan=False), min_size=4, max_size=4)


def _close(p, q, rel=1e-12):
    scale = 1.0 + max(p.max_abs_coef(), q.max_abs_coef())
    return (p - q).max_abs_coef() <= rel * scale


@settings(max_examples=200, deadline=None)
@given(polys(), polys(), polys())
def test_ring_axioms(a, b, c):
    assert _close((a + b) + c, a + (b + c))
    assert _close(a + b, b + a)
    assert _close((a * b) * c, a * (b * c))
    assert _close(a * b, b * a)
    assert _close(a * (b + c), a * b + a * c)


@settings(max_examples=200, deadline=None)
@given(polys(), polys(), points)
def test_evaluation_is_multiplicative(a, b, pt):
    lhs = evaluate(a * b, pt)
    rhs = evaluate(a, pt) * evaluate(b, pt)
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(rhs))


@settings(max_examples=200, deadline=None)
@given(polys(), st.sampled_from(VARS4.names),
       st.lists(st.floats(-0.9, 0.9, allow_nan=False), min_size=4, max_size=4))
def test_derivative_matches_central_differences(p, var, pt):
    h = 1e-5
    i = VARS4.index(var)
    up, dn = list(pt), list(pt)
    up[i] += h
    dn[i] -= h
    fd = (evaluate(p, up) - evaluate(p, dn)) / (2 * h)
    exact = evaluate(differentiate(p, var), pt)
    scale = max(1.0, sum(abs(c) for _, c in p.items()))
    assert abs(fd - exact) <= 1e-6 * scale


@settings(max_examples=100, deadline=None)
@given(polys())
def test_identity_substitution(p):
    ident = {v: VARS4.var(v) for v in VARS4.names}
    assert substitute(p, ident) == p


@settings(max_examples=100, deadline=None)
@given(polys(), st.sampled_from(VARS4.names))
def test_derivative_lowers_degree_in_variable(p, var):
    dp = differentiate(p, var)
    if p.degree_in([var]) > 0:
        assert dp.degree_in([var]) == p.degree_in([var]) - 1 or dp.is_zero()


@settings(max_examples=100, deadline=None)
@given(polys(max_terms=4), polys(max_terms=4))
def test_product_against_symbolic_oracle(a, b):
    expected = sympy_coeffs(to_sympy(a) * to_sympy(b), VARS4)
    got = dict((a * b).items())
    assert set(got) <= set(expected) | set()
    for m, c in expected.items():
        assert abs(got.get(m, 0.0) - c) <= 1e-12 * (1 + abs(c)) + 1e-13
