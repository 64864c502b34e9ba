"""Superlevel sets of ``w_d``, the beta score and gain selection.

``beta(l) = prod(de_j) * sum_{e in grid, e in E} min(1, w_d(e, l))**k``.
Every gain point of a grid over ``L`` is scored and the best one is picked
with a deterministic tie-break (smallest norm, then coordinates).
"""
from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .certificate import Certificate
from .semialg import SemialgebraicSet

__all__ = [
    "GridSpec",
    "GainRanking",
    "superlevel_set",
    "beta",
    "beta_table",
    "select_gains",
    "export_levelsets",
    "write_points_csv",
    "read_points_csv",
    "grid_slack",
]

ARGMAX_RTOL = 1e-9
L_CHUNK = 256


def _fmt(v) -> str:
    return format(float(v), ".17g")


@dataclass
class GridSpec:
    """Uniform grid with both endpoints over ``vars``; ``mask`` marks points in the set.

    ``fixed`` binds variables that are not gridded (used for slices such as
    ``w_d(e0, .)``).
    """

    vars: tuple
    lower: np.ndarray
    upper: np.ndarray
    counts: tuple
    mask: Optional[np.ndarray] = None
    fixed: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vars = tuple(self.vars)
        self.lower = np.asarray(self.lower, dtype=float).ravel()
        self.upper = np.asarray(self.upper, dtype=float).ravel()
        self.counts = tuple(int(c) for c in self.counts)
        d = len(self.vars)
        if self.lower.shape != (d,) or self.upper.shape != (d,) or len(self.counts) != d:
            raise ValueError("grid bounds and counts must match the variables")
        if any(c < 1 for c in self.counts):
            raise ValueError("grid counts must be positive")
        if any(c < 2 for c in self.counts) and self.size > 1:
            raise ValueError("each gridded dimension needs N >= 2")
        if np.any(self.upper < self.lower):
            raise ValueError("grid upper bound below lower bound")
        if self.mask is None:
            self.mask = np.ones(self.size, dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool).ravel()
        if self.mask.shape != (self.size,):
            raise ValueError("mask length must equal the number of grid points")

    @classmethod
    def over(cls, s: SemialgebraicSet, counts, fixed=None) -> "GridSpec":
        """Grid over the bounding box of ``s`` masked by membership."""
        if np.isscalar(counts):
            counts = [int(counts)] * s.dim
        lo, hi = s.bounding_box()
        g = cls(s.vars, lo, hi, counts, None, dict(fixed or {}))
        g.mask = s.contains(g.points(), tol=1e-12)
        return g

    @classmethod
    def single(cls, vars, point, fixed=None) -> "GridSpec":
        p = np.asarray(point, dtype=float).ravel()
        return cls(vars, p, p, [1] * len(p), None, dict(fixed or {}))

    @property
    def size(self) -> int:
        return int(np.prod(self.counts))

    @property
    def spacing(self) -> np.ndarray:
        c = np.array(self.counts, dtype=float)
        return np.where(c > 1, (self.upper - self.lower) / np.maximum(c - 1, 1), 0.0)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def axes(self) -> list:
        return [np.linspace(a, b, n) if n > 1 else np.array([a])
                for a, b, n in zip(self.lower, self.upper, self.counts)]

    def points(self) -> np.ndarray:
        """All grid points, last variable varying fastest."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def masked_points(self) -> np.ndarray:
        return self.points()[self.mask]

    def refined(self) -> "GridSpec":
        """Same box with ``2N - 1`` points per dimension (halved spacing); mask is not rebuilt."""
        return GridSpec(self.vars, self.lower, self.upper, [2 * n - 1 for n in self.counts],
                        None, dict(self.fixed))


def grid_slack(egrid: GridSpec, perimeter: float) -> float:
    """Resolution slack ``sum_j de_j * perimeter`` of a Riemann sum over a set."""
    return float(np.sum(egrid.spacing) * perimeter)


def _split(cert: Certificate, grid: GridSpec, points: np.ndarray):
    """Return full (e, l) coordinate arrays for grid points plus fixed values."""
    n = points.shape[0]
    cols = {}
    for j, v in enumerate(grid.vars):
        cols[v] = points[:, j]
    for v, val in grid.fixed.items():
        cols[v] = np.full(n, float(val))
    need = list(cert.e_vars) + list(cert.l_vars)
    missing = [v for v in need if v not in cols]
    extra = [v for v in cols if v not in need]
    if missing or extra:
        raise ValueError(f"grid does not match (e, l): missing {missing}, unexpected {extra}")
    e = np.stack([cols[v] for v in cert.e_vars], axis=1)
    l = np.stack([cols[v] for v in cert.l_vars], axis=1)
    return e, l


def grid_values(cert: Certificate, grid: GridSpec) -> np.ndarray:
    """``w_d`` at every grid point (ignores the mask)."""
    e, l = _split(cert, grid, grid.points())
    return cert.w_values(e, l)


def superlevel_set(cert: Certificate, grid: GridSpec, level: float = 1.0) -> np.ndarray:
    """Boolean mask ``w_d >= level`` over the grid points that lie in the set."""
    return (grid_values(cert, grid) >= level) & grid.mask


def _check_k(k):
    if int(k) != k or k < 1:
        raise ValueError(f"exponent k must be an integer >= 1, got {k}")
    return int(k)


def _check_egrid(cert: Certificate, egrid: GridSpec):
    if tuple(egrid.vars) != tuple(cert.e_vars):
        raise ValueError(f"error grid must be over {cert.e_vars}, got {egrid.vars}")


def beta_table(cert: Certificate, l_points, egrid: GridSpec, k: int, threads: int = 1,
               with_min: bool = False):
    """beta at each row of ``l_points`` (chunked, deterministic merge).

    With ``with_min`` also returns the smallest ``w_d`` over the error grid
    for each gain.
    """
    k = _check_k(k)
    _check_egrid(cert, egrid)
    l_points = np.atleast_2d(np.asarray(l_points, dtype=float))
    e_pts = egrid.masked_points()
    weight = float(np.prod(egrid.spacing))
    if e_pts.shape[0] == 0 or l_points.shape[0] == 0:
        z = np.zeros(l_points.shape[0])
        return (z, np.full_like(z, np.nan)) if with_min else z
    chunks = [(s, min(s + L_CHUNK, l_points.shape[0]))
              for s in range(0, l_points.shape[0], L_CHUNK)]

    def work(span):
        lo, hi = span
        W = cert.w_table(e_pts, l_points[lo:hi])
        wmin = W.min(axis=0)
        np.minimum(W, 1.0, out=W)
        np.maximum(W, 0.0, out=W)
        return np.sum(W ** k, axis=0) * weight, wmin

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, chunks))
    else:
        parts = [work(c) for c in chunks]
    b = np.concatenate([p[0] for p in parts])
    if with_min:
        return b, np.concatenate([p[1] for p in parts])
    return b


def beta(cert: Certificate, l, egrid: GridSpec, k: int) -> float:
    """beta at a single gain point."""
    l = np.asarray(l, dtype=float).ravel()
    if l.shape != (len(cert.l_vars),):
        raise ValueError(f"gain point must have {len(cert.l_vars)} entries")
    return float(beta_table(cert, l[None, :], egrid, k)[0])


@dataclass
class GainRanking:
    l_vars: tuple
    l_points: np.ndarray
    beta: np.ndarray
    argmax: np.ndarray
    selected: np.ndarray
    selected_index: int
    tie_break: dict
    k: int
    egrid: GridSpec
    lgrid: GridSpec
    w_min: Optional[np.ndarray] = None

    @property
    def max_beta(self) -> float:
        return float(self.beta.max())

    def band(self) -> np.ndarray:
        """Gain points in the argmax set."""
        return self.l_points[self.argmax]

    def summary(self) -> dict:
        return {
            "l_vars": list(self.l_vars),
            "selected": [float(v) for v in self.selected],
            "selected_beta": float(self.beta[self.selected_index]),
            "max_beta": self.max_beta,
            "argmax_count": int(self.argmax.sum()),
            "evaluated": int(self.l_points.shape[0]),
            "k": self.k,
            "e_grid": list(self.egrid.counts),
            "l_grid": list(self.lgrid.counts),
            "tie_break": self.tie_break,
        }

    def to_csv(self, path) -> None:
        """Gain rows: ``w`` is the smallest ``w_d`` over the error grid, ``mask`` the argmax bit."""
        write_points_csv(path, self.l_vars, self.l_points, self.w_min, self.argmax, self.beta)


def select_gains(cert: Certificate, lgrid: GridSpec, egrid: GridSpec, k: int = 1000,
                 threads: int = 1) -> GainRanking:
    """Score every masked gain point and pick ``l*`` from the argmax set."""
    k = _check_k(k)
    if tuple(lgrid.vars) != tuple(cert.l_vars):
        raise ValueError(f"gain grid must be over {cert.l_vars}, got {lgrid.vars}")
    l_points = lgrid.masked_points()
    if l_points.shape[0] == 0:
        raise ValueError("gain grid is empty after masking")
    b, wmin = beta_table(cert, l_points, egrid, k, threads=threads, with_min=True)
    top = float(b.max())
    arg = b >= top - ARGMAX_RTOL * (1.0 + abs(top))
    cand = np.flatnonzero(arg)
    norms = np.linalg.norm(l_points[cand], axis=1)
    # round norms so that floating dust does not decide between equal-norm points
    keys = [(round(float(nv), 12), tuple(l_points[i])) for nv, i in zip(norms, cand)]
    order = sorted(range(len(cand)), key=lambda j: keys[j])
    pick = int(cand[order[0]])
    tied = [int(cand[j]) for j in order if keys[j][0] == keys[order[0]][0]]
    record = {"argmax_size": int(cand.size), "min_norm": float(norms.min()),
              "equal_norm_candidates": len(tied),
              "rule": "smallest norm, then lexicographic coordinates"}
    return GainRanking(tuple(cert.l_vars), l_points, b, arg, l_points[pick].copy(), pick,
                       record, k, egrid, lgrid, wmin)


# -- CSV ---------------------------------------------------------------------------
def write_points_csv(path, names, points, w=None, mask=None, beta_values=None) -> None:
    """Columns ``names..., w, mask, beta``; floats with 17 significant digits."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n = points.shape[0]
    w = np.full(n, np.nan) if w is None else np.asarray(w, dtype=float)
    mask = np.zeros(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    bv = np.full(n, np.nan) if beta_values is None else np.broadcast_to(
        np.asarray(beta_values, dtype=float), (n,))
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(list(names) + ["w", "mask", "beta"])
        for i in range(n):
            wr.writerow([_fmt(v) for v in points[i]]
                        + [_fmt(w[i]), int(mask[i]), _fmt(bv[i])])


def read_points_csv(path):
    """Inverse of :func:`write_points_csv`: ``(names, points, w, mask, beta)``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    if header[-3:] != ["w", "mask", "beta"]:
        raise ValueError(f"{path}: unexpected header {header}")
    names = header[:-3]
    body = rows[1:]
    pts = np.array([[float(v) for v in r[:len(names)]] for r in body]).reshape(len(body), len(names))
    w = np.array([float(r[-3]) for r in body])
    mask = np.array([r[-2] == "1" for r in body], dtype=bool)
    b = np.array([float(r[-1]) for r in body])
    return names, pts, w, mask, b


def export_levelsets(cert: Certificate, grids, path, egrid: Optional[GridSpec] = None,
                     k: int = 1000) -> list:
    """Write one CSV per grid: coordinates, ``w_d``, superlevel bit, beta.

    ``grids`` maps a file stem to a :class:`GridSpec` over any split of
    ``(e, l)`` (missing variables must be bound in ``fixed``). ``beta`` is
    filled when ``egrid`` is given and is the score of each row's gain.
    ``path`` is a directory; returns the written paths.
    """
    os.makedirs(path, exist_ok=True)
    written = []
    for stem, grid in grids.items():
        pts = grid.points()
        e, l = _split(cert, grid, pts)
        w = cert.w_values(e, l)
        mask = (w >= 1.0) & grid.mask
        bv = None
        if egrid is not None:
            uniq, inv = np.unique(l, axis=0, return_inverse=True)
            bv = beta_table(cert, uniq, egrid, k)[np.asarray(inv).ravel()]
        out = os.path.join(path, f"{stem}.csv")
        write_points_csv(out, grid.vars, pts, w, mask, bv)
        written.append(out)
    return written
