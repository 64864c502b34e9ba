"""Compact basic semialgebraic sets with closed-form Lebesgue moments.

Only boxes, balls, the time interval and products of those answer moment
queries; anything else is carried as a bare list of inequalities.
"""
from __future__ import annotations

import math
from itertools import product as iproduct
from typing import Sequence

import numpy as np

from .poly import Polynomial, VariableRegistry

__all__ = [
    "SemialgebraicSet",
    "MomentsUnavailableError",
    "make_box",
    "make_ball",
    "make_time_interval",
    "product_set",
    "lebesgue_moment",
]

BOX, BALL, TIME, GENERIC = "box", "ball", "interval_time", "generic"


class MomentsUnavailableError(ValueError):
    pass


class SemialgebraicSet:
    """``{u : h_i(u) >= 0}`` over a subset ``vars`` of a registry.

    ``shape`` is one of ``box``, ``ball``, ``interval_time`` or ``generic``.
    Generic sets built by :func:`product_set` keep their ``factors`` so that
    moments of products of boxes and balls remain available.
    """

    __slots__ = ("registry", "vars", "inequalities", "shape", "lower", "upper",
                 "center", "radius", "factors")

    def __init__(self, registry: VariableRegistry, vars: Sequence[str],
                 inequalities: Sequence[Polynomial], shape: str = GENERIC, *,
                 lower=None, upper=None, center=None, radius=None, factors=()):
        self.registry = registry
        self.vars = tuple(vars)
        registry.indices(self.vars)
        uniq = []
        for h in inequalities:
            if h.registry != registry:
                raise ValueError("inequality registry does not match set registry")
            if h not in uniq:
                uniq.append(h)
        self.inequalities = tuple(uniq)
        self.shape = shape
        self.lower = None if lower is None else np.asarray(lower, dtype=float)
        self.upper = None if upper is None else np.asarray(upper, dtype=float)
        self.center = None if center is None else np.asarray(center, dtype=float)
        self.radius = None if radius is None else float(radius)
        self.factors = tuple(factors)
        self._check_hint()

    def __repr__(self):
        return f"SemialgebraicSet(shape={self.shape!r}, vars={self.vars!r}, m={len(self.inequalities)})"

    @property
    def dim(self) -> int:
        return len(self.vars)

    def _check_hint(self):
        if self.shape in (BOX, TIME):
            mid = (self.lower + self.upper) / 2
            if not self.contains(mid[None, :])[0]:
                raise ValueError("box hint inconsistent with inequalities (center excluded)")
            for j in range(self.dim):
                out = mid.copy()
                out[j] = self.upper[j] + 1e-3 * (self.upper[j] - self.lower[j])
                if self.contains(out[None, :], tol=0.0)[0]:
                    raise ValueError("box hint inconsistent with inequalities (exterior included)")
        elif self.shape == BALL:
            if not self.contains(self.center[None, :])[0]:
                raise ValueError("ball hint inconsistent with inequalities")
            out = self.center.copy()
            out[0] += 1.001 * self.radius
            if self.contains(out[None, :], tol=0.0)[0]:
                raise ValueError("ball hint inconsistent with inequalities")

    def has_ball_constraint(self) -> bool:
        """True if some inequality reads ``R - |u - c|^2`` over the set's variables."""
        idx = self.registry.indices(self.vars)
        for h in self.inequalities:
            if h.degree != 2 or not set(h.variables()) <= set(self.vars):
                continue
            ok = True
            for m, c in h.items():
                if sum(m) == 2:
                    sq = [i for i in idx if m[i] == 2]
                    if not sq or abs(c + 1.0) > 1e-12:
                        ok = False
                        break
            squares = sum(1 for m, _ in h.items() if sum(m) == 2)
            if ok and squares == len(idx):
                return True
        return False

    # -- membership ----------------------------------------------------------
    def _full_points(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[1] != self.dim:
            raise ValueError(f"points must have {self.dim} columns, got {pts.shape[1]}")
        full = np.zeros((pts.shape[0], len(self.registry)))
        full[:, self.registry.indices(self.vars)] = pts
        return full

    def contains(self, points, tol: float = 1e-9) -> np.ndarray:
        """Membership of each row of ``points`` (columns ordered as ``vars``)."""
        full = self._full_points(points)
        ok = np.ones(full.shape[0], dtype=bool)
        for h in self.inequalities:
            ok &= h.evaluate_many(full) >= -tol
        return ok

    def bounding_box(self):
        if self.shape in (BOX, TIME):
            return self.lower.copy(), self.upper.copy()
        if self.shape == BALL:
            return self.center - self.radius, self.center + self.radius
        if self.factors:
            lows, highs = zip(*(f.bounding_box() for f in self.factors))
            lo = np.concatenate(lows)
            hi = np.concatenate(highs)
            order = [self._factor_vars().index(v) for v in self.vars]
            return lo[order], hi[order]
        raise MomentsUnavailableError("generic set has no known bounding box")

    def _factor_vars(self):
        return [v for f in self.factors for v in f.vars]

    def boundary_samples(self, count: int = 1000, seed: int = 0) -> np.ndarray:
        """Deterministic points on the set boundary (box faces or sphere)."""
        rng = np.random.default_rng(seed)
        if self.shape == BALL:
            g = rng.standard_normal((count, self.dim))
            g /= np.linalg.norm(g, axis=1, keepdims=True)
            return self.center + self.radius * g
        if self.shape in (BOX, TIME):
            u = rng.uniform(self.lower, self.upper, size=(count, self.dim))
            face = rng.integers(0, self.dim, size=count)
            side = rng.integers(0, 2, size=count)
            u[np.arange(count), face] = np.where(side == 1, self.upper[face], self.lower[face])
            return u
        raise MomentsUnavailableError("boundary sampling needs a box or ball")

    # -- coordinates -----------------------------------------------------------
    def normalizer(self):
        """(center, scale) mapping the set onto unit-radius coordinates."""
        if self.shape in (BOX, TIME):
            return (self.lower + self.upper) / 2, (self.upper - self.lower) / 2
        if self.shape == BALL:
            return self.center.copy(), np.full(self.dim, self.radius)
        raise MomentsUnavailableError("only boxes and balls have a normalizer")

    def rescaled(self, center, scale) -> "SemialgebraicSet":
        """The same set in coordinates ``u' = (u - center) / scale``."""
        center = np.asarray(center, dtype=float)
        scale = np.asarray(scale, dtype=float)
        if self.shape in (BOX, TIME):
            return make_box(self.registry, self.vars, (self.lower - center) / scale,
                            (self.upper - center) / scale)
        if self.shape == BALL and np.allclose(scale, scale[0], rtol=0, atol=0):
            return make_ball(self.registry, self.vars, (self.center - center) / scale,
                             self.radius / scale[0])
        reg = self.registry
        bind = {v: reg.const(c) + reg.var(v).scale(s)
                for v, c, s in zip(self.vars, center, scale)}
        return SemialgebraicSet(reg, self.vars, [h.subs(bind) for h in self.inequalities])

    def describe(self) -> dict:
        d = {"shape": self.shape, "vars": list(self.vars)}
        if self.shape in (BOX, TIME):
            d.update(lower=self.lower.tolist(), upper=self.upper.tolist())
        elif self.shape == BALL:
            d.update(center=self.center.tolist(), radius=self.radius)
        d["inequalities"] = [str(h) for h in self.inequalities]
        return d


def _check_vars(registry, vars):
    vars = tuple(vars)
    registry.indices(vars)
    if len(set(vars)) != len(vars):
        raise ValueError("repeated variables in set declaration")
    return vars


def make_box(registry: VariableRegistry, vars, lower, upper) -> SemialgebraicSet:
    vars = _check_vars(registry, vars)
    lower = np.asarray(lower, dtype=float).ravel()
    upper = np.asarray(upper, dtype=float).ravel()
    if lower.shape != (len(vars),) or upper.shape != (len(vars),):
        raise ValueError("bounds must match the number of variables")
    if np.any(~(lower < upper)):
        raise ValueError(f"degenerate interval: lower {lower} must be < upper {upper}")
    ineqs = []
    for v, a, b in zip(vars, lower, upper):
        u = registry.var(v)
        ineqs.append((u - a) * (b - u))
    big = np.maximum(np.abs(lower), np.abs(upper))
    R = float(np.sum(big ** 2))
    ball = registry.const(R)
    for v in vars:
        ball = ball - registry.var(v) ** 2
    ineqs.append(ball)
    return SemialgebraicSet(registry, vars, ineqs, BOX, lower=lower, upper=upper)


def make_time_interval(registry: VariableRegistry, var: str = "t", T: float = 1.0) -> SemialgebraicSet:
    """``[0, T]`` as the single inequality ``t (T - t) >= 0``.

    ``t (T - t) = T^2/4 - (t - T/2)^2`` is already ball-shaped, so no redundant
    constraint is added.
    """
    if not T > 0:
        raise ValueError("horizon must be positive")
    t = registry.var(var)
    return SemialgebraicSet(registry, (var,), [t * (T - t)], TIME,
                            lower=[0.0], upper=[float(T)])


def make_ball(registry: VariableRegistry, vars, center, radius: float) -> SemialgebraicSet:
    vars = _check_vars(registry, vars)
    center = np.asarray(center, dtype=float).ravel()
    if center.shape == (1,) and len(vars) > 1:
        center = np.full(len(vars), center[0])
    if center.shape != (len(vars),):
        raise ValueError("center must match the number of variables")
    if not radius > 0:
        raise ValueError(f"ball radius must be positive, got {radius}")
    h = registry.const(float(radius) ** 2)
    for v, c in zip(vars, center):
        h = h - (registry.var(v) - float(c)) ** 2
    return SemialgebraicSet(registry, vars, [h], BALL, center=center, radius=radius)


def product_set(a: SemialgebraicSet, b: SemialgebraicSet) -> SemialgebraicSet:
    if a.registry != b.registry:
        raise ValueError("sets live in different registries")
    overlap = set(a.vars) & set(b.vars)
    if overlap:
        raise ValueError(f"overlapping variables {sorted(overlap)}")
    vars = a.vars + b.vars
    ineqs = list(a.inequalities) + list(b.inequalities)
    if a.shape in (BOX, TIME) and b.shape in (BOX, TIME):
        # keep the per-factor inequalities; only the hint changes
        s = SemialgebraicSet(a.registry, vars, ineqs, GENERIC, factors=(a, b))
        s.shape = BOX
        s.lower = np.concatenate([a.lower, b.lower])
        s.upper = np.concatenate([a.upper, b.upper])
        return s
    factors = []
    for f in (a, b):
        factors.extend(f.factors if (f.shape == GENERIC and f.factors) else [f])
    if any(f.shape == GENERIC for f in factors):
        factors = []
    return SemialgebraicSet(a.registry, vars, ineqs, GENERIC, factors=factors)


def _ball_centered_moment(alpha, radius):
    if any(a % 2 for a in alpha):
        return 0.0
    n = len(alpha)
    s = sum(alpha)
    num = 2.0
    for a in alpha:
        num *= math.gamma((a + 1) / 2)
    return num / math.gamma((n + s) / 2) * radius ** (n + s) / (n + s)


def lebesgue_moment(set: SemialgebraicSet, alpha: Sequence[int]) -> float:
    """Exact integral of ``u^alpha`` over the set (``alpha`` ordered as ``set.vars``)."""
    alpha = tuple(int(a) for a in alpha)
    if len(alpha) != set.dim or any(a < 0 for a in alpha):
        raise ValueError(f"alpha {alpha} out of range for a {set.dim}-dimensional set")
    if set.shape in (BOX, TIME) and not set.factors:
        val = 1.0
        for a, lo, hi in zip(alpha, set.lower, set.upper):
            val *= (hi ** (a + 1) - lo ** (a + 1)) / (a + 1)
        return float(val)
    if set.shape == BALL:
        c = set.center
        if not np.any(c):
            return _ball_centered_moment(alpha, set.radius)
        # binomial shift u = c + s
        total = 0.0
        for ks in iproduct(*(range(a + 1) for a in alpha)):
            if any(k % 2 for k in ks):
                continue
            coef = 1.0
            for a, k, ci in zip(alpha, ks, c):
                coef *= math.comb(a, k) * ci ** (a - k)
            if coef:
                total += coef * _ball_centered_moment(ks, set.radius)
        return float(total)
    if set.factors:
        pos = {v: i for i, v in enumerate(set.vars)}
        val = 1.0
        for f in set.factors:
            val *= lebesgue_moment(f, [alpha[pos[v]] for v in f.vars])
        return float(val)
    raise MomentsUnavailableError(f"no closed-form moments for a {set.shape} set")
