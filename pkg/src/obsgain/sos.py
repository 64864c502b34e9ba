"""Compile the degree-d dual SOS program into a block-diagonal SDP.

Unknowns are the coefficients of ``v`` (in ``t, x, e, l``) and ``w`` (in
``e, l``). Four polynomial constraints must lie in quadratic modules:

* ``C1``  ``w``                                   on ``E x L``
* ``C2``  ``v(1, z, l)``                           on ``X x E_T x L``
* ``C3``  ``-L_phi v``                             on ``[0,1] x X x E x L``
* ``C4``  ``w - <lambda_X, v(0, ., e, l)> - 1``    on ``E x L``

and the objective is the Lebesgue integral of ``w`` over ``E x L``. Each
constraint contributes one equality row per monomial of its ambient basis
(coefficient matching) and one PSD block per multiplier.

Compilation happens in unit-radius coordinates: ``x = c_x + s_x x'`` and so
on, with the Jacobians folded into the objective and into ``C4``.
"""
from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .certificate import Certificate
from .poly import Polynomial, VariableRegistry, monomial_basis, parse_polynomial
from .problem import AugmentedField, ObserverProblem, augmented_field
from .sdp import SdpProblem, SdpSolution
from .semialg import (SemialgebraicSet, lebesgue_moment, make_box, make_ball,
                      make_time_interval, product_set)

__all__ = [
    "QuadraticModuleTemplate",
    "DualProgramLayout",
    "CertificateError",
    "lie_derivative",
    "average_initial",
    "expand_quadratic_module",
    "compile_dual",
    "recover_certificate",
    "constraint_polynomials",
]

CONSTRAINTS = ("C1", "C2", "C3", "C4")


class CertificateError(RuntimeError):
    pass


@dataclass
class QuadraticModuleTemplate:
    """``s_0 + sum_k h_k s_k`` with ``s_k = b_k^T G_k b_k``.

    ``multipliers[0]`` is ``(1, basis_0)``; ``block_index`` gives the SDP block
    of each multiplier and ``row_offset`` the first SDP row of this module.
    """

    name: str
    vars: tuple
    budget: int
    multipliers: list
    rows: list = field(default_factory=list)
    row_offset: int = 0
    block_index: list = field(default_factory=list)

    @property
    def block_sizes(self) -> list:
        return [len(basis) for _, basis in self.multipliers]

    @property
    def registry(self) -> VariableRegistry:
        return self.multipliers[0][0].registry


def _template(name, domain: SemialgebraicSet, budget: int) -> QuadraticModuleTemplate:
    reg = domain.registry
    mults = [(reg.const(1.0), monomial_basis(reg, domain.vars, budget // 2))]
    for h in domain.inequalities:
        half = (budget - h.degree) // 2
        if half < 0:
            continue
        mults.append((h, monomial_basis(reg, domain.vars, half)))
    rows = monomial_basis(reg, domain.vars, budget)
    return QuadraticModuleTemplate(name, tuple(domain.vars), budget, mults, rows)


def lie_derivative(v: Polynomial, phi: AugmentedField) -> Polynomial:
    """``dv/dt + sum_i dv/dz_i * phi_i``."""
    out = v.diff("t")
    for name, comp in zip(phi.state_vars, phi.phi):
        dv = v.diff(name)
        if not dv.is_zero():
            out = out + dv * comp
    return out


def average_initial(v: Polynomial, X: SemialgebraicSet) -> Polynomial:
    """``int_X v(0, x, e, l) dx`` as a polynomial in the remaining variables."""
    reg = v.registry
    v0 = v.subs({"t": 0.0}) if "t" in reg else v
    xi = reg.indices(X.vars)
    cache = {}
    out = {}
    for m, c in v0.items():
        alpha = tuple(m[i] for i in xi)
        if alpha not in cache:
            cache[alpha] = lebesgue_moment(X, alpha)
        mom = cache[alpha]
        if mom == 0.0:
            continue
        rest = list(m)
        for i in xi:
            rest[i] = 0
        rest = tuple(rest)
        out[rest] = out.get(rest, 0.0) + c * mom
    return Polynomial(out, reg)


def _gram_polynomial(basis, G, reg) -> Polynomial:
    out = {}
    n = len(basis)
    for a in range(n):
        ma = basis[a]
        for b in range(a, n):
            g = G[a, b] if a == b else 2.0 * G[a, b]
            if g == 0.0:
                continue
            mono = tuple(x + y for x, y in zip(ma, basis[b]))
            out[mono] = out.get(mono, 0.0) + g
    return Polynomial(out, reg)


def expand_quadratic_module(template: QuadraticModuleTemplate, gram_blocks) -> Polynomial:
    """Numeric ``s_0 + sum_k h_k s_k`` from one symmetric Gram matrix per multiplier."""
    if len(gram_blocks) != len(template.multipliers):
        raise ValueError(
            f"{len(gram_blocks)} Gram blocks given, template has {len(template.multipliers)}")
    reg = template.registry
    total = reg.zero()
    for (h, basis), G in zip(template.multipliers, gram_blocks):
        G = np.asarray(G, dtype=float)
        if G.shape != (len(basis), len(basis)):
            raise ValueError(f"Gram block shape {G.shape} does not match basis size {len(basis)}")
        total = total + h * _gram_polynomial(basis, G, reg)
    return total


@dataclass
class DualProgramLayout:
    """Everything needed to map an SDP solution back to ``(v_d, w_d)``."""

    degree: int
    degree_c3: int
    registry: VariableRegistry
    v_basis: list
    w_basis: list
    templates: list
    num_constraints: int
    blocks: list
    phi_scaled: tuple
    state_vars: tuple
    X_scaled: SemialgebraicSet
    EL_scaled: SemialgebraicSet
    centers: dict
    scales: dict
    jac_x: float
    jac_el: float
    objective: np.ndarray
    fingerprint: str
    e_vars: tuple
    l_vars: tuple
    horizon: float = 1.0
    sdpa_sha256: str = ""

    @property
    def num_free(self) -> int:
        return len(self.v_basis) + len(self.w_basis)

    def template(self, name) -> QuadraticModuleTemplate:
        return next(t for t in self.templates if t.name == name)

    # -- manifest -------------------------------------------------------------
    def to_manifest(self) -> dict:
        def mults(t):
            return [{"h": str(h), "basis": [list(m) for m in basis], "block": bi}
                    for (h, basis), bi in zip(t.multipliers, t.block_index)]
        return {
            "format": "obsgain-layout/1",
            "degree": self.degree,
            "degree_c3": self.degree_c3,
            "registry": list(self.registry.names),
            "fingerprint": self.fingerprint,
            "horizon": self.horizon,
            "e_vars": list(self.e_vars),
            "l_vars": list(self.l_vars),
            "state_vars": list(self.state_vars),
            "phi_scaled": [str(p) for p in self.phi_scaled],
            "X_scaled": self.X_scaled.describe(),
            "EL_scaled": [f.describe() for f in self.EL_scaled.factors],
            "centers": self.centers,
            "scales": self.scales,
            "jac_x": self.jac_x,
            "jac_el": self.jac_el,
            "v_basis": [list(m) for m in self.v_basis],
            "w_basis": [list(m) for m in self.w_basis],
            "objective": self.objective.tolist(),
            "num_constraints": self.num_constraints,
            "blocks": list(self.blocks),
            "constraints": [{"name": t.name, "vars": list(t.vars), "budget": t.budget,
                             "row_offset": t.row_offset, "num_rows": len(t.rows),
                             "multipliers": mults(t)} for t in self.templates],
            "sdpa_sha256": self.sdpa_sha256,
        }

    @classmethod
    def from_manifest(cls, d: dict) -> "DualProgramLayout":
        if d.get("format") != "obsgain-layout/1":
            raise ValueError("not an obsgain layout manifest")
        reg = VariableRegistry(d["registry"])

        def mkset(desc):
            if desc["shape"] in ("box", "interval_time"):
                return make_box(reg, desc["vars"], desc["lower"], desc["upper"])
            if desc["shape"] == "ball":
                return make_ball(reg, desc["vars"], desc["center"], desc["radius"])
            raise ValueError(f"cannot rebuild a {desc['shape']} set from a manifest")

        templates = []
        for c in d["constraints"]:
            mults = [(parse_polynomial(mm["h"], reg), [tuple(b) for b in mm["basis"]])
                     for mm in c["multipliers"]]
            rows = monomial_basis(reg, c["vars"], c["budget"])
            if len(rows) != c["num_rows"]:
                raise ValueError(f"constraint {c['name']}: row count mismatch")
            templates.append(QuadraticModuleTemplate(
                c["name"], tuple(c["vars"]), c["budget"], mults, rows, c["row_offset"],
                [mm["block"] for mm in c["multipliers"]]))
        el = mkset(d["EL_scaled"][0])
        for f in d["EL_scaled"][1:]:
            el = product_set(el, mkset(f))
        return cls(
            degree=d["degree"], degree_c3=d["degree_c3"], registry=reg,
            v_basis=[tuple(m) for m in d["v_basis"]], w_basis=[tuple(m) for m in d["w_basis"]],
            templates=templates, num_constraints=d["num_constraints"], blocks=d["blocks"],
            phi_scaled=tuple(parse_polynomial(s, reg) for s in d["phi_scaled"]),
            state_vars=tuple(d["state_vars"]), X_scaled=mkset(d["X_scaled"]), EL_scaled=el,
            centers=d["centers"], scales=d["scales"], jac_x=d["jac_x"], jac_el=d["jac_el"],
            objective=np.array(d["objective"]), fingerprint=d["fingerprint"],
            e_vars=tuple(d["e_vars"]), l_vars=tuple(d["l_vars"]), horizon=d["horizon"],
            sdpa_sha256=d.get("sdpa_sha256", ""))


def _even_degree(d: int) -> int:
    d = int(d)
    if d % 2:
        warnings.warn(f"relaxation degree {d} is odd; rounded to {d + 1}", stacklevel=3)
        d += 1
    return d


def c3_budget(d: int, phi_degree: int) -> int:
    budget = d + max(phi_degree, 1) - 1
    return budget + (budget % 2)


def _normalise(problem: ObserverProblem):
    centers, scales = {}, {}
    for s in (problem.X, problem.E, problem.L):
        c, k = s.normalizer()
        for v, ci, ki in zip(s.vars, c, k):
            centers[v] = float(ci)
            scales[v] = float(ki)
    return centers, scales


def _scaled_pieces(problem: ObserverProblem, phi: AugmentedField, centers, scales):
    reg = problem.registry
    fwd = {v: reg.const(centers[v]) + reg.var(v).scale(scales[v]) for v in centers}
    phi_s = tuple(p.subs(fwd).scale(1.0 / scales[z]) for p, z in zip(phi.phi, phi.state_vars))

    def resc(s, ref_vars):
        c = np.array([centers[v] for v in ref_vars])
        k = np.array([scales[v] for v in ref_vars])
        return s.rescaled(c, k)

    return (phi_s, resc(problem.X, problem.x_vars), resc(problem.E, problem.e_vars),
            resc(problem.E_T, problem.e_vars), resc(problem.L, problem.l_vars))


def compile_dual(problem: ObserverProblem, d: int):
    """Build the SDP for relaxation degree ``d`` (even, rounded up if odd).

    Returns ``(SdpProblem, DualProgramLayout)``.
    """
    d = _even_degree(d)
    phi = augmented_field(problem)
    if d < max(2, phi.degree):
        raise ValueError(
            f"degree too small: need d >= max(2, deg(phi)) = {max(2, phi.degree)}, got {d}")
    reg = problem.registry
    centers, scales = _normalise(problem)
    phi_s, Xs, Es, ETs, Ls = _scaled_pieces(problem, phi, centers, scales)
    field_s = AugmentedField(phi_s, phi.state_vars, reg, phi.horizon)
    d3 = c3_budget(d, max(p.degree for p in phi_s))
    jac_x = float(np.prod([scales[v] for v in problem.x_vars]))
    jac_el = float(np.prod([scales[v] for v in problem.e_vars + problem.l_vars]))

    time_set = make_time_interval(reg, "t", 1.0)
    EL = product_set(Es, Ls)
    domains = {
        "C1": EL,
        "C2": product_set(product_set(Xs, ETs), Ls),
        "C3": product_set(product_set(product_set(time_set, Xs), Es), Ls),
        "C4": EL,
    }
    budgets = {"C1": d, "C2": d, "C3": d3, "C4": d}
    templates = [_template(name, domains[name], budgets[name]) for name in CONSTRAINTS]

    v_basis = monomial_basis(reg, ("t",) + problem.x_vars + problem.e_vars + problem.l_vars, d)
    w_basis = monomial_basis(reg, problem.e_vars + problem.l_vars, d)
    nv, nw = len(v_basis), len(w_basis)
    nf = nv + nw

    # linear images of each unknown under each constraint map
    images = {name: [] for name in CONSTRAINTS}  # list of (col, Polynomial)
    for j, mono in enumerate(v_basis):
        vm = Polynomial._raw({mono: 1.0}, reg)
        images["C2"].append((j, vm.subs({"t": 1.0})))
        images["C3"].append((j, -lie_derivative(vm, field_s)))
        images["C4"].append((j, average_initial(vm, Xs).scale(-jac_x)))
    for j, mono in enumerate(w_basis):
        wm = Polynomial._raw({mono: 1.0}, reg)
        images["C1"].append((nv + j, wm))
        images["C4"].append((nv + j, wm))
    constants = {"C1": {}, "C2": {}, "C3": {}, "C4": {reg.zero_monomial(): -1.0}}

    rows, cols, vals = [], [], []
    b = []
    blocks = []
    col_offset = nf
    row_offset = 0
    for t in templates:
        t.row_offset = row_offset
        index = {m: row_offset + k for k, m in enumerate(t.rows)}
        # free-variable columns: QM - L(u) = const
        for col, img in images[t.name]:
            for m, c in img.items():
                try:
                    r = index[m]
                except KeyError:
                    raise RuntimeError(
                        f"{t.name}: monomial {m} outside ambient basis (degree budget bug)") from None
                rows.append(r)
                cols.append(col)
                vals.append(-c)
        bvec = np.zeros(len(t.rows))
        for m, c in constants[t.name].items():
            bvec[index[m] - row_offset] = c
        b.append(bvec)
        # Gram block columns
        t.block_index = []
        for h, basis in t.multipliers:
            n = len(basis)
            t.block_index.append(len(blocks))
            blocks.append(n)
            hterms = list(h.items())
            k = 0
            for a in range(n):
                ma = basis[a]
                for bb in range(a, n):
                    mab = tuple(x + y for x, y in zip(ma, basis[bb]))
                    for g, hc in hterms:
                        rows.append(index[tuple(x + y for x, y in zip(mab, g))])
                        cols.append(col_offset + k)
                        vals.append(hc)
                    k += 1
            col_offset += k
        row_offset += len(t.rows)

    m = row_offset
    A = sp.csr_matrix((np.array(vals), (np.array(rows, dtype=np.int64),
                                         np.array(cols, dtype=np.int64))), shape=(m, col_offset))
    c = np.zeros(col_offset)
    objective = np.array([lebesgue_moment(EL, [mono[i] for i in reg.indices(EL.vars)])
                          for mono in w_basis]) * jac_el
    c[nv:nf] = objective
    sdp = SdpProblem(tuple(blocks), nf, A, np.concatenate(b), c)

    layout = DualProgramLayout(
        degree=d, degree_c3=d3, registry=reg, v_basis=v_basis, w_basis=w_basis,
        templates=templates, num_constraints=m, blocks=blocks, phi_scaled=phi_s,
        state_vars=phi.state_vars, X_scaled=Xs, EL_scaled=EL, centers=centers, scales=scales,
        jac_x=jac_x, jac_el=jac_el, objective=objective, fingerprint=problem.fingerprint(),
        e_vars=problem.e_vars, l_vars=problem.l_vars, horizon=problem.T)
    return sdp, layout


def _poly_from_coeffs(basis, coeffs, reg) -> Polynomial:
    return Polynomial({m: float(c) for m, c in zip(basis, coeffs)}, reg)


def constraint_polynomials(layout: DualProgramLayout, v: Polynomial, w: Polynomial) -> dict:
    """The four constraint polynomials (scaled coordinates) for numeric ``v``, ``w``."""
    field_s = AugmentedField(layout.phi_scaled, layout.state_vars, layout.registry, layout.horizon)
    return {
        "C1": w,
        "C2": v.subs({"t": 1.0}),
        "C3": -lie_derivative(v, field_s),
        "C4": w - average_initial(v, layout.X_scaled).scale(layout.jac_x) - 1.0,
    }


def _to_original(p: Polynomial, layout: DualProgramLayout) -> Polynomial:
    reg = layout.registry
    back = {v: (reg.var(v) - layout.centers[v]).scale(1.0 / layout.scales[v])
            for v in layout.centers}
    return p.subs(back)


def recover_certificate(layout: DualProgramLayout, solution: SdpSolution) -> Certificate:
    """Read ``(v_d, w_d)`` off the solution and measure reconstruction residuals."""
    if solution.status in ("infeasible", "unbounded"):
        raise CertificateError(
            f"solver status {solution.status}: {solution.message or 'no certificate'}; "
            f"residuals {solution.residuals}")
    if solution.status != "optimal":
        warnings.warn(f"solver status {solution.status}; certificate may be inaccurate "
                      f"({solution.message})", stacklevel=2)
    reg = layout.registry
    xf = np.asarray(solution.free_values, dtype=float)
    nv = len(layout.v_basis)
    v_s = _poly_from_coeffs(layout.v_basis, xf[:nv], reg)
    w_s = _poly_from_coeffs(layout.w_basis, xf[nv:], reg)
    polys = constraint_polynomials(layout, v_s, w_s)
    res = {}
    for t in layout.templates:
        grams = [solution.block_matrices[bi] for bi in t.block_index]
        gap = polys[t.name] - expand_quadratic_module(t, grams)
        scale = 1.0 + polys[t.name].max_abs_coef()
        res[t.name] = gap.max_abs_coef()
        res[t.name + "_rel"] = gap.max_abs_coef() / scale
    objective = float(layout.objective @ xf[nv:])
    return Certificate(
        v_d=_to_original(v_s, layout), w_d=_to_original(w_s, layout), degree=layout.degree,
        objective=objective, residuals=res, fingerprint=layout.fingerprint,
        e_vars=layout.e_vars, l_vars=layout.l_vars, status=solution.status,
        meta={"degree_c3": layout.degree_c3, "iterations": solution.iterations,
              "solver_residuals": dict(solution.residuals),
              "w_scaled_max_coef": w_s.max_abs_coef()})


def layout_checksum(sdpa_text: str) -> str:
    return hashlib.sha256(sdpa_text.encode()).hexdigest()
