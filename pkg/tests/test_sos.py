import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from obsgain.poly import Polynomial, VariableRegistry, evaluate, parse_polynomial
from obsgain.problem import AugmentedField, ObserverProblem
from obsgain.sdp import SdpSolution
from obsgain.semialg import make_ball, make_box
from obsgain.sos import (CertificateError, DualProgramLayout, average_initial, compile_dual,
                         constraint_polynomials, expand_quadratic_module, lie_derivative,
                         recover_certificate)
from obsgain.validate import ValidationGrids, containment_check, ground_truth

from conftest import cached, linear_problem, planar_problem, scalar_problem, solve_fixture

REG = VariableRegistry(["t", "x1", "x2", "e1", "e2", "l1", "l2"])


def P(text, reg=REG):
    return parse_polynomial(text, reg)


def field(components, state_vars, reg=REG):
    return AugmentedField(tuple(P(c, reg) for c in components), tuple(state_vars), reg, 1.0)


def solution_from(sdp, x):
    free, mats = sdp.unpack(x)
    return SdpSolution(free, mats, np.zeros(sdp.num_constraints), "optimal", {}, 0)


# -- Lie derivative ------------------------------------------------------------------
def test_lie_of_time_is_one():
    phi = field(["x2", "-x1", "e1", "l1*e2"], ["x1", "x2", "e1", "e2"])
    assert lie_derivative(P("t"), phi) == REG.const(1)


def test_lie_rotation_conserves_norm():
    phi = field(["x2", "-x1"], ["x1", "x2"])
    assert lie_derivative(P("x1^2 + x2^2"), phi).is_zero()


def test_lie_linear_error_component():
    phi = field(["-x1 - 3*x2", "-2*x1 - 6*x2", "-(1 + l1)*e1 - 3*e2", "-2*e1 - 6*e2 - l2*e1"],
                ["x1", "x2", "e1", "e2"])
    assert lie_derivative(P("e1^2"), phi) == P("-2*(1 + l1)*e1^2 - 6*e1*e2")


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=6, max_size=6),
       st.lists(st.floats(-2, 2), min_size=6, max_size=6), st.floats(-3, 3), st.floats(-3, 3))
def test_lie_derivative_is_linear(cu, cv, a, b):
    phi = field(["-x1 + x1*x2", "-x2", "-e1 + x1*e2 - l1*e1", "-e2 - l2*e1"],
                ["x1", "x2", "e1", "e2"])
    monos = [P(m) for m in ("1", "t*x1", "x2^2", "e1*e2", "l1*x1^2", "t^2*e2")]
    u = sum((m.scale(c) for m, c in zip(monos, cu)), REG.zero())
    v = sum((m.scale(c) for m, c in zip(monos, cv)), REG.zero())
    lhs = lie_derivative(u.scale(a) + v.scale(b), phi)
    rhs = lie_derivative(u, phi).scale(a) + lie_derivative(v, phi).scale(b)
    assert (lhs - rhs).max_abs_coef() <= 1e-12 * (1 + rhs.max_abs_coef())


# -- averaging over X ------------------------------------------------------------------
SQUARE = make_box(REG, ["x1", "x2"], [-1, -1], [1, 1])


def test_average_examples():
    assert average_initial(REG.const(1), SQUARE) == REG.const(4)
    assert average_initial(P("x1^2"), SQUARE).allclose(REG.const(4 / 3))
    assert average_initial(P("x1*e1"), SQUARE).is_zero()


def test_average_drops_time_and_state():
    out = average_initial(P("t*x1 + 3*e1*l2*x2^2 + t^2"), SQUARE)
    assert out.allclose(P("4*e1*l2"))


@st.composite
def random_v(draw):
    terms = {}
    for _ in range(draw(st.integers(1, 6))):
        m = draw(st.lists(st.integers(0, 3), min_size=7, max_size=7))
        terms[tuple(m)] = draw(st.floats(-2, 2).filter(lambda c: abs(c) > 1e-3))
    return Polynomial(terms, REG)


@settings(max_examples=25, deadline=None)
@given(random_v(), st.lists(st.floats(-1, 1), min_size=4, max_size=4))
def test_average_matches_adaptive_quadrature(v, el):
    X = make_ball(REG, ["x1", "x2"], [0.2, -0.1], 0.8)
    avg = evaluate(average_initial(v, X), [0, 0, 0] + el)

    def integrand(x2, x1):
        return evaluate(v, [0, x1, x2] + el)

    half = lambda x1: math.sqrt(max(0.64 - (x1 - 0.2) ** 2, 0.0))  # noqa: E731
    ref, _ = integrate.dblquad(integrand, -0.6, 1.0, lambda x1: -0.1 - half(x1),
                               lambda x1: -0.1 + half(x1), epsabs=1e-13, epsrel=1e-11)
    scale = max(abs(ref), 1e-3 * sum(abs(c) for _, c in v.items()))
    assert abs(avg - ref) <= 1e-8 * scale


@settings(max_examples=40, deadline=None)
@given(random_v(), random_v(), st.floats(-3, 3))
def test_average_is_linear(u, v, a):
    lhs = average_initial(u.scale(a) + v, SQUARE)
    rhs = average_initial(u, SQUARE).scale(a) + average_initial(v, SQUARE)
    assert (lhs - rhs).max_abs_coef() <= 1e-12 * (1 + rhs.max_abs_coef())


# -- quadratic module expansion ----------------------------------------------------------
def one_d_template(budget=2):
    from obsgain.sos import _template
    reg = VariableRegistry(["e1"])
    return _template("Q", make_ball(reg, ["e1"], [0], 1), budget), reg


def test_expand_zero_blocks():
    t, reg = one_d_template()
    assert expand_quadratic_module(t, [np.zeros((n, n)) for n in t.block_sizes]).is_zero()


def test_expand_identity_s0():
    t, reg = one_d_template()
    assert t.block_sizes == [2, 1]
    out = expand_quadratic_module(t, [np.eye(2), np.zeros((1, 1))])
    assert out == parse_polynomial("1 + e1^2", reg)


def test_expand_constraint_multiplier():
    t, reg = one_d_template()
    out = expand_quadratic_module(t, [np.zeros((2, 2)), np.ones((1, 1))])
    assert out == parse_polynomial("1 - e1^2", reg)


def test_expand_dimension_mismatch():
    t, _ = one_d_template()
    with pytest.raises(ValueError):
        expand_quadratic_module(t, [np.eye(3), np.zeros((1, 1))])
    with pytest.raises(ValueError):
        expand_quadratic_module(t, [np.eye(2)])


# -- compilation ------------------------------------------------------------------------
@pytest.fixture(scope="module")
def scalar_compiled():
    return compile_dual(scalar_problem(), 4)


def test_scalar_counts(scalar_compiled):
    sdp, layout = scalar_compiled
    assert len(layout.v_basis) == math.comb(8, 4) == 70
    assert len(layout.w_basis) == math.comb(6, 4) == 15
    c1 = layout.template("C1")
    assert c1.block_sizes[0] == 6
    assert sdp.num_free == 85


def test_target_multiplier_size(scalar_compiled):
    _, layout = scalar_compiled
    c2 = layout.template("C2")
    (h, basis), = [(h, b) for h, b in c2.multipliers[1:] if "e1" in h.variables()]
    assert h.degree == 2
    assert len(basis) == 4
    assert len(basis) * (len(basis) + 1) // 2 == 10


def test_degree_too_small():
    p = ObserverProblem.from_strings(
        ["-x1^3"], ["x1"],
        lambda r: make_box(r, ["x1"], [-1], [1]), lambda r: make_box(r, ["e1"], [-1], [1]),
        lambda r: make_box(r, ["e1"], [-0.05], [0.05]), lambda r: make_box(r, ["l1"], [-1], [1]))
    with pytest.raises(ValueError, match="degree too small"):
        compile_dual(p, 2)


def test_odd_degree_rounds_up():
    with pytest.warns(UserWarning, match="odd"):
        _, layout = compile_dual(scalar_problem(), 3)
    assert layout.degree == 4


def test_c3_budget_accounts_for_field_degree():
    _, layout = compile_dual(planar_problem(["-x1 + x1*x2", "-x2"]), 4)
    assert layout.degree_c3 == 6
    assert layout.template("C3").budget == 6


def test_objective_is_moment_vector(scalar_compiled):
    sdp, layout = scalar_compiled
    reg = layout.registry
    for mono, c in zip(layout.w_basis, layout.objective):
        a, b = mono[reg.index("e1")], mono[reg.index("l1")]
        # scaled basis (e, l / 10) against the original measure
        ref = (1 - (-1) ** (a + 1)) / (a + 1) * (1 - (-1) ** (b + 1)) / (b + 1) * 10
        assert math.isclose(c, ref, rel_tol=1e-14, abs_tol=1e-14)
    assert np.array_equal(sdp.c[sdp.num_free - 15:sdp.num_free], layout.objective)


@pytest.mark.parametrize("factory,d", [(scalar_problem, 2), (scalar_problem, 4),
                                       (linear_problem, 2), (linear_problem, 4)])
def test_row_count_and_block_usage(factory, d):
    sdp, layout = compile_dual(factory(), d)
    assert sdp.num_constraints == sum(len(t.rows) for t in layout.templates)
    assert sdp.num_constraints == layout.num_constraints
    used = np.diff(sdp.A.tocsc().indptr) > 0
    offs = sdp.offsets
    for k in range(len(sdp.blocks)):
        assert used[offs[k]:offs[k + 1]].any()
    assert sorted(bi for t in layout.templates for bi in t.block_index) == list(range(len(sdp.blocks)))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_row_residual_equals_identity_gap(seed):
    sdp, layout = cached(("compiled", "scalar", 2), lambda: compile_dual(scalar_problem(), 2))
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(sdp.num_vars)
    sol = solution_from(sdp, x)
    r = sdp.A @ (sdp.weights() * sdp.pack(sol.free_values, sol.block_matrices)) - sdp.b
    cert = recover_certificate(layout, sol)
    for t in layout.templates:
        rows = r[t.row_offset:t.row_offset + len(t.rows)]
        assert math.isclose(cert.residuals[t.name], np.max(np.abs(rows)), rel_tol=1e-9, abs_tol=1e-12)


def _hand_feasible(problem, d):
    """``v = 0, w = 2``: C1 = 2 and C4 = 1 are constant squares."""
    sdp, layout = compile_dual(problem, d)
    mats = [np.zeros((n, n)) for n in sdp.blocks]
    mats[layout.template("C1").block_index[0]][0, 0] = 2.0
    mats[layout.template("C4").block_index[0]][0, 0] = 1.0
    free = np.zeros(sdp.num_free)
    free[len(layout.v_basis)] = 2.0
    return sdp, layout, free, mats


def test_hand_built_point_round_trip():
    sdp, layout, free, mats = _hand_feasible(scalar_problem(L=(-1.0, 1.0)), 4)
    x = sdp.pack(free, mats)
    assert np.max(np.abs(sdp.A @ (sdp.weights() * x) - sdp.b)) == 0.0
    cert = recover_certificate(layout, SdpSolution(free, mats, np.zeros(sdp.num_constraints),
                                                   "optimal", {}, 0))
    nv = len(layout.v_basis)
    got = np.array([cert.w_d.coefficient(m) for m in layout.w_basis])
    assert np.max(np.abs(got - free[nv:])) <= 1e-12
    assert cert.v_d.is_zero()
    assert max(cert.residuals.values()) <= 1e-12


def test_zero_drift_pipeline_residuals():
    _, _, sol, cert = cached(("zero", 2), lambda: solve_fixture(planar_problem(["0", "0"]), 2))
    assert sol.status == "optimal"
    assert max(cert.residuals[c] for c in ("C1", "C2", "C3", "C4")) <= 1e-6


def test_corrupted_gram_block_is_detected():
    sdp, layout, sol, cert = cached(("zero", 2), lambda: solve_fixture(planar_problem(["0", "0"]), 2))
    mats = [M.copy() for M in sol.block_matrices]
    bi = layout.template("C1").block_index[0]
    mats[bi][0, 0] += 0.1
    bad = SdpSolution(sol.free_values, mats, sol.equality_duals, "optimal", {}, 0)
    assert recover_certificate(layout, bad).residuals["C1"] >= 0.09


@pytest.mark.parametrize("status", ["infeasible", "unbounded"])
def test_failed_solves_raise(scalar_compiled, status):
    sdp, layout = scalar_compiled
    sol = SdpSolution(np.zeros(sdp.num_free), [np.zeros((n, n)) for n in sdp.blocks],
                      np.zeros(sdp.num_constraints), status, {"primal_eq": 1.0}, 3, message="no")
    with pytest.raises(CertificateError, match=status):
        recover_certificate(layout, sol)


def test_non_optimal_status_warns(scalar_compiled):
    sdp, layout = scalar_compiled
    sol = SdpSolution(np.zeros(sdp.num_free), [np.zeros((n, n)) for n in sdp.blocks],
                      np.zeros(sdp.num_constraints), "max_iter", {}, 200)
    with pytest.warns(UserWarning, match="max_iter"):
        recover_certificate(layout, sol)


def test_manifest_round_trip(scalar_d4):
    sdp, layout, sol, cert = scalar_d4
    clone = DualProgramLayout.from_manifest(layout.to_manifest())
    assert clone.to_manifest() == layout.to_manifest()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        again = recover_certificate(clone, sol)
    assert again.w_d == cert.w_d
    assert again.objective == cert.objective


def test_identities_hold_at_solution(scalar_d4):
    sdp, layout, sol, cert = scalar_d4
    nv = len(layout.v_basis)
    reg = layout.registry
    v = Polynomial(dict(zip(layout.v_basis, sol.free_values[:nv])), reg)
    w = Polynomial(dict(zip(layout.w_basis, sol.free_values[nv:])), reg)
    polys = constraint_polynomials(layout, v, w)
    for t in layout.templates:
        gap = polys[t.name] - expand_quadratic_module(t, [sol.block_matrices[i] for i in t.block_index])
        assert gap.max_abs_coef() <= 1e-6 * (1 + polys[t.name].max_abs_coef())


def test_feasibility_transfers_to_certificate(scalar_d4):
    _, _, sol, cert = scalar_d4
    assert sol.status == "optimal"
    report = ground_truth(scalar_problem(), ValidationGrids(e_count=81, l_count=101, steps=400))
    assert report.admissible.any()
    assert containment_check(cert, report, tol=1e-6) == []
