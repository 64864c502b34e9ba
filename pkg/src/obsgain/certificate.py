"""Polynomial certificates ``(v_d, w_d)`` and their JSON form."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .poly import Polynomial, VariableRegistry, monomial_matrix

__all__ = ["Certificate", "poly_to_json", "poly_from_json"]


def poly_to_json(p: Polynomial) -> list:
    return [[list(m), c] for m, c in ((m, p.coefficient(m)) for m in p.monomials())]


def poly_from_json(data, registry: VariableRegistry) -> Polynomial:
    return Polynomial({tuple(m): c for m, c in data}, registry)


@dataclass
class Certificate:
    """Degree-``d`` solution of the dual SOS program, in original coordinates.

    ``v_d`` takes normalised time ``t / T`` in ``[0, 1]``; ``w_d`` depends on
    ``(e, l)`` only. ``residuals`` maps constraint names to the largest
    coefficient gap between each constraint polynomial and its SOS expansion.
    """

    v_d: Polynomial
    w_d: Polynomial
    degree: int
    objective: float
    residuals: dict
    fingerprint: str
    e_vars: tuple
    l_vars: tuple
    status: str = "optimal"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        allowed = set(self.e_vars) | set(self.l_vars)
        extra = set(self.w_d.variables()) - allowed
        if extra:
            raise ValueError(f"w_d must depend on (e, l) only; found {sorted(extra)}")

    @property
    def registry(self) -> VariableRegistry:
        return self.w_d.registry

    def w_values(self, e_points, l_points) -> np.ndarray:
        """``w_d`` at paired rows of ``e_points`` and ``l_points``."""
        e_points = np.atleast_2d(np.asarray(e_points, dtype=float))
        l_points = np.atleast_2d(np.asarray(l_points, dtype=float))
        reg = self.registry
        full = np.zeros((max(e_points.shape[0], l_points.shape[0]), len(reg)))
        full[:, reg.indices(self.e_vars)] = e_points
        full[:, reg.indices(self.l_vars)] = l_points
        return self.w_d.evaluate_many(full)

    def w_table(self, e_points, l_points) -> np.ndarray:
        """Matrix ``W[i, j] = w_d(e_i, l_j)`` via the separable monomial split."""
        e_points = np.atleast_2d(np.asarray(e_points, dtype=float))
        l_points = np.atleast_2d(np.asarray(l_points, dtype=float))
        reg = self.registry
        ei = reg.indices(self.e_vars)
        li = reg.indices(self.l_vars)
        e_monos = sorted({tuple(m[i] for i in ei) for m, _ in self.w_d.items()})
        l_monos = sorted({tuple(m[i] for i in li) for m, _ in self.w_d.items()})
        if not e_monos:
            return np.zeros((e_points.shape[0], l_points.shape[0]))
        e_pos = {m: k for k, m in enumerate(e_monos)}
        l_pos = {m: k for k, m in enumerate(l_monos)}
        C = np.zeros((len(e_monos), len(l_monos)))
        for m, c in self.w_d.items():
            C[e_pos[tuple(m[i] for i in ei)], l_pos[tuple(m[i] for i in li)]] += c
        Ve = monomial_matrix(e_points, np.array(e_monos, dtype=np.int64))
        Vl = monomial_matrix(l_points, np.array(l_monos, dtype=np.int64))
        return Ve @ C @ Vl.T

    def scaled(self, factor: float) -> "Certificate":
        """Copy with ``w_d`` multiplied by ``factor`` (used for perturbation checks)."""
        return Certificate(self.v_d, self.w_d.scale(factor), self.degree,
                           self.objective * factor, dict(self.residuals), self.fingerprint,
                           self.e_vars, self.l_vars, self.status, dict(self.meta))

    # -- serialisation -------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": "obsgain-certificate/1",
            "registry": list(self.registry.names),
            "degree": self.degree,
            "objective": self.objective,
            "status": self.status,
            "fingerprint": self.fingerprint,
            "e_vars": list(self.e_vars),
            "l_vars": list(self.l_vars),
            "residuals": self.residuals,
            "meta": self.meta,
            "v_d": poly_to_json(self.v_d),
            "w_d": poly_to_json(self.w_d),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Certificate":
        if d.get("format") != "obsgain-certificate/1":
            raise ValueError("not an obsgain certificate")
        reg = VariableRegistry(d["registry"])
        return cls(poly_from_json(d["v_d"], reg), poly_from_json(d["w_d"], reg),
                   int(d["degree"]), float(d["objective"]), dict(d["residuals"]),
                   d["fingerprint"], tuple(d["e_vars"]), tuple(d["l_vars"]),
                   d.get("status", "optimal"), dict(d.get("meta", {})))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "Certificate":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))
