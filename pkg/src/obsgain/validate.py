"""Trajectory-based ground truth for the gain/error admissibility question.

A pair ``(e0, l)`` is admissible when, for every sampled ``x0`` in ``X``, the
error ``e(T)`` of the augmented flow started at ``(x0, e0)`` lies in ``E_T``.
Flows are integrated with fixed-step classical RK4 on scaled time ``[0, 1]``.

Two shortcuts keep full sweeps cheap without changing the answer:

* when the error dynamics do not involve ``x``, the ``x0`` samples all give
  the same error trajectory, so only one is integrated;
* when they are moreover linear in ``e``, RK4 applied to ``e0`` equals the
  RK4 propagator matrix applied to ``e0`` (RK4 is linear on linear fields),
  so one propagator per gain serves every ``e0``.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .certificate import Certificate
from .poly import monomial_matrix
from .problem import AugmentedField, ObserverProblem, augmented_field, error_dynamics
from .semialg import BALL, SemialgebraicSet

__all__ = [
    "NonFiniteStateError",
    "FieldEvaluator",
    "integrate",
    "admissible",
    "x0_lattice",
    "gain_samples",
    "error_samples",
    "ValidationGrids",
    "ValidationReport",
    "ground_truth",
    "containment_check",
    "FingerprintMismatch",
]

BOUNDARY_TOL = 1e-9
CONTAINMENT_TOL = 1e-6
ESCAPE_FACTOR = 10.0


class NonFiniteStateError(FloatingPointError):
    def __init__(self, step, indices=()):
        super().__init__(f"non-finite state at RK4 step {step}")
        self.step = step
        self.indices = tuple(int(i) for i in indices)


class FingerprintMismatch(ValueError):
    pass


class FieldEvaluator:
    """Vectorised evaluation of a polynomial vector field.

    ``__call__(t, Z, P)`` takes time (scalar), states ``Z`` of shape
    ``(N, len(state_vars))`` and parameters ``P`` of shape ``(N, len(params))``.
    """

    def __init__(self, polys, state_vars, params):
        reg = polys[0].registry
        self.state_vars = tuple(state_vars)
        self.params = tuple(params)
        cols = ("t",) + self.state_vars + self.params if "t" in reg else self.state_vars + self.params
        self.cols = cols
        idx = reg.indices(cols)
        monos = sorted({m for p in polys for m, _ in p.items()})
        self.monos = np.array([[m[i] for i in idx] for m in monos], dtype=np.int64).reshape(
            len(monos), len(idx))
        pos = {m: j for j, m in enumerate(monos)}
        self.coef = np.zeros((len(monos), len(polys)))
        for i, p in enumerate(polys):
            for m, c in p.items():
                self.coef[pos[m], i] = c
        self.has_t = "t" in reg

    def __call__(self, t, Z, P):
        n = Z.shape[0]
        parts = []
        if self.has_t:
            parts.append(np.full((n, 1), float(t)))
        parts.append(Z)
        if P is not None and P.shape[1]:
            parts.append(P)
        pts = np.hstack(parts) if len(parts) > 1 else parts[0]
        if self.monos.shape[0] == 0:
            return np.zeros((n, self.coef.shape[1]))
        return monomial_matrix(pts, self.monos) @ self.coef


def _gain_vars(phi: AugmentedField):
    return tuple(v for v in phi.registry.names if v != "t" and v not in phi.state_vars)


def _rk4(fun, z, P, steps, box=None):
    """Fixed-step RK4 on ``[0, 1]``; returns ``(z1, ok, first_bad_step)``.

    Trajectories that become non-finite or leave ``box`` are frozen and
    flagged; ``first_bad_step`` is the earliest such step (or ``None``).
    """
    h = 1.0 / steps
    z = np.array(z, dtype=float, copy=True)
    ok = np.ones(z.shape[0], dtype=bool)
    first_bad = None
    for s in range(steps):
        t = s * h
        act = np.flatnonzero(ok)
        if act.size == 0:
            break
        za = z[act]
        Pa = P[act] if P is not None else None
        k1 = fun(t, za, Pa)
        k2 = fun(t + h / 2, za + (h / 2) * k1, Pa)
        k3 = fun(t + h / 2, za + (h / 2) * k2, Pa)
        k4 = fun(t + h, za + h * k3, Pa)
        zn = za + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        bad = ~np.all(np.isfinite(zn), axis=1)
        if box is not None:
            lo, hi = box
            with np.errstate(invalid="ignore"):
                bad |= np.any((zn < lo) | (zn > hi), axis=1)
        if bad.any():
            if first_bad is None:
                first_bad = s + 1
            ok[act[bad]] = False
            zn[bad] = za[bad]
        z[act] = zn
    return z, ok, first_bad


def integrate(phi: AugmentedField, z0, l=None, steps: int = 1000):
    """Terminal state ``z(1)`` of the augmented flow (one row per trajectory).

    Raises :class:`NonFiniteStateError` (with the step index) if any
    trajectory overflows.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    z0 = np.asarray(z0, dtype=float)
    single = z0.ndim == 1
    Z = np.atleast_2d(z0)
    if Z.shape[1] != len(phi.state_vars):
        raise ValueError(f"state must have {len(phi.state_vars)} entries")
    if not np.all(np.isfinite(Z)):
        raise ValueError("initial state must be finite")
    gv = _gain_vars(phi)
    P = None
    if gv:
        if l is None:
            raise ValueError(f"gain values needed for {gv}")
        P = np.atleast_2d(np.asarray(l, dtype=float))
        if P.shape[1] != len(gv):
            raise ValueError(f"gain vector must have {len(gv)} entries")
        P = np.broadcast_to(P, (Z.shape[0], len(gv)))
    fun = FieldEvaluator(phi.phi, phi.state_vars, gv)
    with np.errstate(over="ignore", invalid="ignore"):
        z1, ok, bad = _rk4(fun, Z, P, steps)
    if not ok.all():
        raise NonFiniteStateError(bad, np.flatnonzero(~ok))
    return z1[0] if single else z1


# -- sampling ----------------------------------------------------------------------
def _unit_cube_lattice(dim, count):
    axes = [np.linspace(-1.0, 1.0, count)] * dim
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def _squash_to_ball(u):
    """Map the cube ``[-1,1]^n`` onto the unit ball (radial rescale)."""
    inf = np.max(np.abs(u), axis=1)
    two = np.linalg.norm(u, axis=1)
    f = np.divide(inf, two, out=np.zeros_like(two), where=two > 0)
    return u * f[:, None]


def x0_lattice(X: SemialgebraicSet, count: int = 25) -> np.ndarray:
    """Deterministic ``count**n`` lattice inside ``X`` (squashed onto balls)."""
    u = _unit_cube_lattice(X.dim, count)
    if X.shape == BALL:
        return X.center + X.radius * _squash_to_ball(u)
    lo, hi = X.bounding_box()
    return lo + (u + 1.0) / 2.0 * (hi - lo)


def error_samples(E: SemialgebraicSet, count: int):
    """Cartesian grid over the bounding box of ``E`` restricted to ``E``.

    Returns ``(points, cell_volume)``.
    """
    lo, hi = E.bounding_box()
    axes = [np.linspace(a, b, count) for a, b in zip(lo, hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    pts = pts[E.contains(pts, tol=1e-12)]
    cell = float(np.prod((hi - lo) / (count - 1)))
    return pts, cell


def gain_samples(L: SemialgebraicSet, count: int, polar: Optional[bool] = None) -> np.ndarray:
    """Gain points: radius x angle sweep for a planar ball, masked Cartesian grid otherwise."""
    if polar is None:
        polar = L.shape == BALL and L.dim == 2
    if polar:
        if not (L.shape == BALL and L.dim == 2):
            raise ValueError("polar gain sampling needs a two-dimensional ball")
        radii = L.radius * np.arange(1, count) / (count - 1)
        ang = 2.0 * np.pi * np.arange(count) / count
        rr, aa = np.meshgrid(radii, ang, indexing="ij")
        ring = np.stack([rr.ravel() * np.cos(aa.ravel()), rr.ravel() * np.sin(aa.ravel())], axis=1)
        return L.center + np.vstack([np.zeros((1, 2)), ring])
    lo, hi = L.bounding_box()
    axes = [np.linspace(a, b, count) for a, b in zip(lo, hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    return pts[L.contains(pts, tol=1e-12)]


# -- admissibility -------------------------------------------------------------------
def _escape_box(problem: ObserverProblem):
    lo_x, hi_x = problem.X.bounding_box()
    lo_e, hi_e = problem.E.bounding_box()
    lo = np.concatenate([lo_x, lo_e])
    hi = np.concatenate([hi_x, hi_e])
    c = (lo + hi) / 2
    half = (hi - lo) / 2 * ESCAPE_FACTOR
    return c - half, c + half


def _in_target(problem: ObserverProblem, e1: np.ndarray) -> np.ndarray:
    return problem.E_T.contains(e1, tol=BOUNDARY_TOL)


def _error_field_shape(problem: ObserverProblem):
    """(depends_on_x, linear_in_e) for the error dynamics."""
    g = error_dynamics(problem)
    reg = problem.registry
    xi = reg.indices(problem.x_vars)
    ei = reg.indices(problem.e_vars)
    ti = reg.index("t")
    dep_x = any(m[i] for p in g for m, _ in p.items() for i in xi)
    lin_e = all(sum(m[i] for i in ei) == 1 and m[ti] == 0 for p in g for m, _ in p.items())
    return dep_x, lin_e


def _sweep(problem: ObserverProblem, e0s, ls, x0s, steps, chunk=200_000):
    """Admissibility matrix ``A[j, i]`` for gain ``ls[j]`` and error ``e0s[i]``.

    Returns ``(A, failures)``; failures counts escaped/overflowed trajectories.
    """
    n = problem.n
    phi = augmented_field(problem)
    dep_x, lin_e = _error_field_shape(problem)
    n_l, n_e = ls.shape[0], e0s.shape[0]
    lo, hi = _escape_box(problem)
    failures = 0

    if not dep_x:
        g = phi.phi[n:]
        fun = FieldEvaluator(g, problem.e_vars, problem.l_vars)
        elo, ehi = lo[n:], hi[n:]
        if lin_e:
            # RK4 propagator: integrate the identity columns, one block per gain
            I = np.tile(np.eye(n), (n_l, 1))
            P = np.repeat(ls, n, axis=0)
            with np.errstate(over="ignore", invalid="ignore"):
                cols, ok, _ = _rk4(fun, I, P, steps)
            Phi = cols.reshape(n_l, n, n).transpose(0, 2, 1)  # Phi[j] @ e0
            good = ok.reshape(n_l, n).all(axis=1)
            e1 = np.einsum("jab,ib->jia", Phi, e0s)
            with np.errstate(invalid="ignore"):
                A = _in_target(problem, e1.reshape(-1, n)).reshape(n_l, n_e)
            A &= good[:, None]
            failures = int((~good).sum()) * n_e
            return A, failures
        pairs_l = np.repeat(np.arange(n_l), n_e)
        pairs_e = np.tile(np.arange(n_e), n_l)
        A = np.zeros(n_l * n_e, dtype=bool)
        for s in range(0, pairs_l.size, chunk):
            sl = slice(s, s + chunk)
            with np.errstate(over="ignore", invalid="ignore"):
                e1, ok, _ = _rk4(fun, e0s[pairs_e[sl]], ls[pairs_l[sl]], steps, (elo, ehi))
            A[sl] = ok & _in_target(problem, e1)
            failures += int((~ok).sum())
        return A.reshape(n_l, n_e), failures

    fun = FieldEvaluator(phi.phi, phi.state_vars, problem.l_vars)
    A = np.ones((n_l, n_e), dtype=bool)
    n_x = x0s.shape[0]
    for xi in range(n_x):
        # one x0 at a time keeps memory flat; pairs already failed are skipped
        jl, ie = np.nonzero(A)
        if jl.size == 0:
            break
        for s in range(0, jl.size, chunk):
            sl = slice(s, s + chunk)
            z0 = np.hstack([np.repeat(x0s[xi:xi + 1], jl[sl].size, axis=0), e0s[ie[sl]]])
            with np.errstate(over="ignore", invalid="ignore"):
                z1, ok, _ = _rk4(fun, z0, ls[jl[sl]], steps, (lo, hi))
            good = ok & _in_target(problem, z1[:, n:])
            failures += int((~ok).sum())
            A[jl[sl][~good], ie[sl][~good]] = False
    return A, failures


def admissible(problem: ObserverProblem, l, e0, x0_samples, steps: int = 1000) -> bool:
    """True iff ``e(T)`` lands in ``E_T`` for every ``x0`` sample."""
    x0s = np.atleast_2d(np.asarray(x0_samples, dtype=float))
    if x0s.shape[0] == 0:
        raise ValueError("need at least one x0 sample")
    if x0s.shape[1] != problem.n:
        raise ValueError(f"x0 samples must have {problem.n} columns")
    l = np.atleast_2d(np.asarray(l, dtype=float))
    e0 = np.atleast_2d(np.asarray(e0, dtype=float))
    A, _ = _sweep(problem, e0, l, x0s, steps)
    return bool(A[0, 0])


@dataclass
class ValidationGrids:
    """Sampling settings; ``l_points`` overrides the generated gain samples."""

    e_count: int = 41
    l_count: int = 41
    x0_count: int = 25
    steps: int = 1000
    polar: Optional[bool] = None
    extra_x0: int = 0
    l_points: Optional[np.ndarray] = None

    def settings(self) -> dict:
        return {"e_count": self.e_count, "l_count": self.l_count, "x0_count": self.x0_count,
                "steps": self.steps, "polar": self.polar, "extra_x0": self.extra_x0,
                "integrator": "rk4-fixed-step",
                "custom_l_points": self.l_points is not None}


@dataclass
class ValidationReport:
    e_vars: tuple
    l_vars: tuple
    x0: np.ndarray
    e0: np.ndarray
    l: np.ndarray
    admissible: np.ndarray  # (n_l, n_e)
    cell_volume: float
    seed: int
    settings: dict
    fingerprint: str
    failures: int = 0

    @property
    def counts(self) -> np.ndarray:
        return self.admissible.sum(axis=1)

    @property
    def measure(self) -> np.ndarray:
        return self.counts * self.cell_volume

    def optimal_gains(self) -> np.ndarray:
        c = self.counts
        return self.l[c == c.max()] if c.size else self.l[:0]

    def summary(self) -> dict:
        c = self.counts
        return {
            "fingerprint": self.fingerprint,
            "seed": self.seed,
            "settings": self.settings,
            "x0_samples": int(self.x0.shape[0]),
            "e0_samples": int(self.e0.shape[0]),
            "l_samples": int(self.l.shape[0]),
            "cell_volume": self.cell_volume,
            "admissible_pairs": int(self.admissible.sum()),
            "failures": self.failures,
            "max_count": int(c.max()) if c.size else 0,
            "optimal_gain_count": int((c == c.max()).sum()) if c.size else 0,
            "counts": [int(v) for v in c],
        }

    def to_csv(self, path) -> None:
        c = self.counts
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(list(self.l_vars) + list(self.e_vars) + ["admissible", "count"])
            for j in range(self.l.shape[0]):
                lrow = [format(float(v), ".17g") for v in self.l[j]]
                for i in range(self.e0.shape[0]):
                    wr.writerow(lrow + [format(float(v), ".17g") for v in self.e0[i]]
                                + [int(self.admissible[j, i]), int(c[j])])

    def save(self, csv_path, json_path) -> None:
        self.to_csv(csv_path)
        with open(json_path, "w") as fh:
            json.dump(self.summary(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    def admissible_pairs(self):
        """``(e0, l)`` arrays of all admissible samples."""
        jl, ie = np.nonzero(self.admissible)
        return self.e0[ie], self.l[jl]


def ground_truth(problem: ObserverProblem, grids: ValidationGrids = None,
                 seed: int = 0) -> ValidationReport:
    """Full sweep over the ``e0`` grid, gain samples and ``x0`` lattice."""
    grids = grids or ValidationGrids()
    x0 = x0_lattice(problem.X, grids.x0_count)
    if grids.extra_x0:
        rng = np.random.default_rng(seed)
        lo, hi = problem.X.bounding_box()
        extra = []
        while sum(len(b) for b in extra) < grids.extra_x0:
            cand = rng.uniform(lo, hi, size=(2 * grids.extra_x0, problem.n))
            extra.append(cand[problem.X.contains(cand)])
        x0 = np.vstack([x0, np.vstack(extra)[:grids.extra_x0]])
    e0, cell = error_samples(problem.E, grids.e_count)
    if grids.l_points is not None:
        ls = np.atleast_2d(np.asarray(grids.l_points, dtype=float))
    else:
        ls = gain_samples(problem.L, grids.l_count, grids.polar)
    A, failures = _sweep(problem, e0, ls, x0, grids.steps)
    return ValidationReport(problem.e_vars, problem.l_vars, x0, e0, ls, A, cell, int(seed),
                            grids.settings(), problem.fingerprint(), failures)


def containment_check(cert: Certificate, report: ValidationReport,
                      tol: float = CONTAINMENT_TOL) -> list:
    """Admissible samples with ``w_d < 1 - tol``: list of ``(e0, l, w)``."""
    if cert.fingerprint != report.fingerprint:
        raise FingerprintMismatch(
            f"certificate fingerprint {cert.fingerprint} does not match report {report.fingerprint}")
    if not report.admissible.any():
        return []
    W = cert.w_table(report.e0, report.l).T  # (n_l, n_e)
    jl, ie = np.nonzero(report.admissible & (W < 1.0 - tol))
    return [(report.e0[i].copy(), report.l[j].copy(), float(W[j, i])) for j, i in zip(jl, ie)]
