"""Observer problem instances and the symbolic error / augmented dynamics."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .poly import Polynomial, VariableRegistry, parse_polynomial
from .semialg import SemialgebraicSet, make_time_interval

__all__ = ["ObserverProblem", "AugmentedField", "make_registry", "error_dynamics",
           "augmented_field", "gain_names"]


def gain_names(n: int, m: int) -> list:
    # row-major flattening of the n x m gain matrix: l_ij -> l_{i*m + j + 1}
    return [f"l{k + 1}" for k in range(n * m)]


def make_registry(n: int, m: int) -> VariableRegistry:
    """Registry ``(t, x1..xn, e1..en, l1..l_nm)``."""
    if n < 1 or m < 1:
        raise ValueError("need at least one state and one output")
    return VariableRegistry(["t"] + [f"x{i + 1}" for i in range(n)]
                            + [f"e{i + 1}" for i in range(n)] + gain_names(n, m))


@dataclass(frozen=True)
class AugmentedField:
    """Right-hand side of the stacked ``(x, e)`` dynamics on scaled time ``[0, 1]``."""

    phi: tuple
    state_vars: tuple
    registry: VariableRegistry
    horizon: float

    @property
    def degree(self) -> int:
        return max(p.degree for p in self.phi)

    def __len__(self):
        return len(self.phi)


class ObserverProblem:
    """Drift system ``x' = f(t, x)``, output ``y = h(x)`` and the sets X, E, E_T, L.

    ``T`` is the user horizon; internally time is rescaled to ``[0, 1]``.
    """

    def __init__(self, registry: VariableRegistry, f: Sequence[Polynomial],
                 h: Sequence[Polynomial], X: SemialgebraicSet, E: SemialgebraicSet,
                 E_T: SemialgebraicSet, L: SemialgebraicSet, T: float = 1.0,
                 check_target: bool = True):
        self.registry = registry
        self.f = tuple(f)
        self.h = tuple(h)
        self.n = len(self.f)
        self.m = len(self.h)
        if self.n < 1 or self.m < 1:
            raise ValueError("need at least one state equation and one output")
        self.x_vars = tuple(f"x{i + 1}" for i in range(self.n))
        self.e_vars = tuple(f"e{i + 1}" for i in range(self.n))
        self.l_vars = tuple(gain_names(self.n, self.m))
        expected = ("t",) + self.x_vars + self.e_vars + self.l_vars
        if registry.names != expected:
            raise ValueError(f"registry must be {expected}, got {registry.names}")
        for i, fi in enumerate(self.f):
            if fi.registry != registry:
                raise ValueError(f"f[{i}] uses a different registry")
            if not set(fi.variables()) <= set(("t",) + self.x_vars):
                raise ValueError(f"f[{i}] may only depend on t and x: {fi}")
        for j, hj in enumerate(self.h):
            if hj.registry != registry:
                raise ValueError(f"h[{j}] uses a different registry")
            if not set(hj.variables()) <= set(self.x_vars):
                raise ValueError(f"h[{j}] may only depend on x: {hj}")
        for name, s, vars in (("X", X, self.x_vars), ("E", E, self.e_vars),
                              ("E_T", E_T, self.e_vars), ("L", L, self.l_vars)):
            if s.registry != registry:
                raise ValueError(f"set {name} uses a different registry")
            if tuple(s.vars) != vars:
                raise ValueError(f"set {name} must be declared over {vars}, got {s.vars}")
            if not s.has_ball_constraint():
                raise ValueError(f"set {name} lacks a ball-type defining polynomial")
        if not T > 0:
            raise ValueError("horizon T must be positive")
        self.X, self.E, self.E_T, self.L = X, E, E_T, L
        self.T = float(T)
        self.time_set = make_time_interval(registry, "t", 1.0)
        if check_target:
            self._check_target_inside_error_set()

    @classmethod
    def from_strings(cls, f: Sequence[str], h: Sequence[str], X, E, E_T, L, T: float = 1.0):
        """Build from polynomial strings; sets are callables ``registry -> set``."""
        reg = make_registry(len(f), len(h))
        return cls(reg, [parse_polynomial(s, reg) for s in f],
                   [parse_polynomial(s, reg) for s in h],
                   X(reg), E(reg), E_T(reg), L(reg), T)

    def _check_target_inside_error_set(self, count: int = 1000):
        try:
            pts = self.E_T.boundary_samples(count)
        except ValueError:
            return
        if not np.all(self.E.contains(pts, tol=1e-9)):
            raise ValueError("target error set E_T is not contained in E")

    @property
    def state_vars(self) -> tuple:
        return self.x_vars + self.e_vars

    def gain_matrix_names(self):
        return np.array(self.l_vars).reshape(self.n, self.m)

    def describe(self) -> dict:
        return {
            "n": self.n, "m": self.m, "T": self.T,
            "f": [str(p) for p in self.f], "h": [str(p) for p in self.h],
            "X": self.X.describe(), "E": self.E.describe(),
            "E_T": self.E_T.describe(), "L": self.L.describe(),
        }

    def fingerprint(self) -> str:
        blob = json.dumps(self.describe(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def error_dynamics(problem: ObserverProblem) -> tuple:
    """``g_i = f_i(t,x) - f_i(t,x-e) - sum_j l_ij (h_j(x) - h_j(x-e))``."""
    reg = problem.registry
    shift = {x: reg.var(x) - reg.var(e) for x, e in zip(problem.x_vars, problem.e_vars)}
    dh = [hj - hj.subs(shift) for hj in problem.h]
    gains = problem.gain_matrix_names()
    g = []
    for i, fi in enumerate(problem.f):
        gi = fi - fi.subs(shift)
        for j in range(problem.m):
            gi = gi - reg.var(gains[i, j]) * dh[j]
        g.append(gi)
    return tuple(g)


def augmented_field(problem: ObserverProblem) -> AugmentedField:
    """Stack ``(f, g)`` and rescale time so that the horizon becomes 1."""
    reg = problem.registry
    T = problem.T
    phi = list(problem.f) + list(error_dynamics(problem))
    if T != 1.0:
        phi = [p.subs({"t": reg.var("t").scale(T)}).scale(T) for p in phi]
    return AugmentedField(tuple(phi), problem.state_vars, reg, T)
