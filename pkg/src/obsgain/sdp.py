"""Block-diagonal SDPs with free variables and a primal-dual interior-point solver.

Standard form::

    minimize    c_f . x_f + sum_k <C_k, X_k>
    subject to  A_f x_f + sum_k A_k(X_k) = b,   X_k PSD,  x_f free.

The variable vector is ``[x_f, svec(X_1), svec(X_2), ...]`` where ``svec``
lists upper-triangular entries row by row. Coefficients stored for a block
are *symmetric-matrix entries*: a row coefficient ``a`` at off-diagonal
position ``(i, j)`` contributes ``2 * a * X_ij`` to the row, exactly as an
SDPA file lists the upper triangle of a symmetric constraint matrix.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from ._schur import entry_structure, schur_sparse

__all__ = ["SdpProblem", "SdpSolution", "solve", "residuals", "svec_weights"]

logger = logging.getLogger(__name__)

OPTIMAL, INFEASIBLE, UNBOUNDED, MAX_ITER, NUMERICAL = (
    "optimal", "infeasible", "unbounded", "max_iter", "numerical_failure")


def svec_weights(n: int) -> np.ndarray:
    iu, ju = np.triu_indices(n)
    return np.where(iu == ju, 1.0, 2.0)


def svec(X: np.ndarray) -> np.ndarray:
    return X[np.triu_indices(X.shape[0])]


def smat(v: np.ndarray, n: int) -> np.ndarray:
    iu, ju = np.triu_indices(n)
    S = np.zeros((n, n))
    S[iu, ju] = v
    S[ju, iu] = v
    return S


@dataclass(eq=False)
class SdpProblem:
    blocks: tuple
    num_free: int
    A: sp.csr_matrix
    b: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        self.blocks = tuple(int(n) for n in self.blocks)
        if any(n < 1 for n in self.blocks):
            raise ValueError("block dimensions must be positive")
        self.num_free = int(self.num_free)
        self.A = sp.csr_matrix(self.A, dtype=float)
        self.A.sum_duplicates()
        self.A.eliminate_zeros()
        self.A.sort_indices()
        self.b = np.asarray(self.b, dtype=float).ravel()
        self.c = np.asarray(self.c, dtype=float).ravel()
        if self.A.shape != (self.b.size, self.num_vars):
            raise ValueError(
                f"A has shape {self.A.shape}, expected ({self.b.size}, {self.num_vars})")
        if self.c.size != self.num_vars:
            raise ValueError(f"c has length {self.c.size}, expected {self.num_vars}")
        if not (np.all(np.isfinite(self.A.data)) and np.all(np.isfinite(self.b))
                and np.all(np.isfinite(self.c))):
            raise ValueError("problem data must be finite")

    @property
    def num_constraints(self) -> int:
        return self.b.size

    @property
    def offsets(self) -> list:
        offs = [self.num_free]
        for n in self.blocks:
            offs.append(offs[-1] + n * (n + 1) // 2)
        return offs

    @property
    def num_vars(self) -> int:
        return self.offsets[-1]

    def weights(self) -> np.ndarray:
        return np.concatenate([np.ones(self.num_free)] + [svec_weights(n) for n in self.blocks])

    def equals(self, other: "SdpProblem", tol: float = 0.0) -> bool:
        if self.blocks != other.blocks or self.num_free != other.num_free:
            return False
        if self.A.shape != other.A.shape:
            return False
        diff = abs(self.A - other.A)
        return (diff.max() if diff.nnz else 0.0) <= tol and \
            np.max(np.abs(self.b - other.b), initial=0.0) <= tol and \
            np.max(np.abs(self.c - other.c), initial=0.0) <= tol

    def objective(self, x_free, mats) -> float:
        return float(self.c @ (self.weights() * self.pack(x_free, mats)))

    def pack(self, x_free, mats) -> np.ndarray:
        return np.concatenate([np.asarray(x_free, dtype=float).ravel()] + [svec(M) for M in mats])

    def unpack(self, x) -> tuple:
        offs = self.offsets
        mats = [smat(x[offs[k]:offs[k + 1]], n) for k, n in enumerate(self.blocks)]
        return x[:self.num_free].copy(), mats


@dataclass
class SdpSolution:
    free_values: np.ndarray
    block_matrices: list
    equality_duals: np.ndarray
    status: str
    residuals: dict
    iterations: int
    dual_slacks: list = field(default_factory=list)
    primal_objective: float = math.nan
    dual_objective: float = math.nan
    log: list = field(default_factory=list)
    message: str = ""


def residuals(problem: SdpProblem, solution: SdpSolution) -> dict:
    """KKT residuals: primal equality, dual feasibility, relative gap, min eigenvalue."""
    x_f = np.asarray(solution.free_values, dtype=float).ravel()
    mats = solution.block_matrices
    if x_f.size != problem.num_free or len(mats) != len(problem.blocks) or \
            any(M.shape != (n, n) for M, n in zip(mats, problem.blocks)):
        raise ValueError("solution shape does not match problem")
    y = np.asarray(solution.equality_duals, dtype=float).ravel()
    if y.size != problem.num_constraints:
        raise ValueError("dual vector length does not match constraint count")
    x = problem.pack(x_f, mats)
    w = problem.weights()
    r_p = problem.A @ (w * x) - problem.b
    aty = problem.A.T @ y
    slack = problem.c - aty
    dual = float(np.max(np.abs(slack[:problem.num_free]), initial=0.0))
    offs = problem.offsets
    min_eig = math.inf
    for k, n in enumerate(problem.blocks):
        Z = smat(slack[offs[k]:offs[k + 1]], n)
        dual = max(dual, max(0.0, -float(np.linalg.eigvalsh(Z)[0])))
        min_eig = min(min_eig, float(np.linalg.eigvalsh(mats[k])[0]))
    pobj = float(problem.c @ (w * x))
    dobj = float(problem.b @ y)
    return {
        "primal_eq": float(np.max(np.abs(r_p), initial=0.0)),
        "dual": dual,
        "gap": abs(pobj - dobj) / (1.0 + abs(pobj) + abs(dobj)),
        "min_eig": min_eig if problem.blocks else 0.0,
    }


class _Operator:
    """Cached block slices of A for the solver loop."""

    def __init__(self, problem: SdpProblem):
        self.p = problem
        A = problem.A.tocsc()
        offs = problem.offsets
        self.Af = A[:, :problem.num_free].toarray() if problem.num_free else None
        self.blk = []
        self.blk_csr = []
        self.C = []
        self.entries = []
        for k, n in enumerate(problem.blocks):
            sl = A[:, offs[k]:offs[k + 1]]
            self.blk.append(sl)
            self.blk_csr.append(sl.tocsr())
            self.C.append(smat(problem.c[offs[k]:offs[k + 1]], n))
            self.entries.append(entry_structure(sl, n))
        self.cf = problem.c[:problem.num_free]
        self.w = [svec_weights(n) for n in problem.blocks]

    def apply(self, x_f, mats):
        """A_f x_f + sum_k A_k(X_k)."""
        out = np.zeros(self.p.num_constraints)
        if self.Af is not None:
            out += self.Af @ x_f
        for k, M in enumerate(mats):
            out += self.blk_csr[k] @ (self.w[k] * svec(M))
        return out

    def adjoint(self, y):
        """(A_f^T y, [A_k^*(y)])."""
        free = self.Af.T @ y if self.Af is not None else np.zeros(0)
        mats = [smat(self.blk[k].T @ y, n) for k, n in enumerate(self.p.blocks)]
        return free, mats

    def schur(self, X, Zi):
        m = self.p.num_constraints
        M = np.zeros((m, m))
        for k, n in enumerate(self.p.blocks):
            ptr, rows, vals, ei, ej = self.entries[k]
            n_pairs = 0.5 * ei.size * (ei.size + 1) * max(1.0, rows.size / max(ei.size, 1)) ** 2
            touched = np.unique(rows)
            if touched.size * 2.0 * n ** 3 < n_pairs:
                self._schur_dense(M, k, n, touched, X[k], Zi[k])
            else:
                schur_sparse(M, ptr, rows, vals, ei, ej, X[k], Zi[k])
        return M

    def _schur_dense(self, M, k, n, touched, X, Zi):
        sl = self.blk[k]
        slr = self.blk_csr[k]
        w = self.w[k]
        for i in touched:
            Ai = smat(slr.getrow(i).toarray().ravel(), n)
            G = X @ Ai @ Zi
            G = 0.5 * (G + G.T)
            M[:, i] += sl @ (w * svec(G))


def _max_step(X, dX):
    """Largest alpha with X + alpha dX PSD (inf if unbounded)."""
    try:
        L = np.linalg.cholesky(X)
    except np.linalg.LinAlgError:
        return 0.0
    T = sla.solve_triangular(L, dX, lower=True)
    T = sla.solve_triangular(L, T.T, lower=True)
    lam = np.linalg.eigvalsh(0.5 * (T + T.T))[0]
    return math.inf if lam >= 0 else -1.0 / lam


def _inv_spd(Z):
    L = np.linalg.cholesky(Z)
    Li = sla.solve_triangular(L, np.eye(Z.shape[0]), lower=True)
    return Li.T @ Li


def solve(problem: SdpProblem, tol: float = 1e-7, max_iter: int = 200,
          verbose: bool = False) -> SdpSolution:
    """HKM primal-dual path following with Mehrotra predictor-corrector.

    Deterministic: no randomness; identical input gives identical output.
    """
    op = _Operator(problem)
    blocks = problem.blocks
    nf = problem.num_free
    m = problem.num_constraints
    b = problem.b
    ntot = max(sum(blocks), 1)

    # starting point
    X, Z = [], []
    for k, n in enumerate(blocks):
        sl = op.blk_csr[k]
        rown = np.sqrt(np.asarray(sl.multiply(sl).multiply(op.w[k][None, :]).sum(axis=1)).ravel())
        xi = max(10.0, math.sqrt(n),
                 n * float(np.max((1.0 + np.abs(b)) / (1.0 + rown), initial=1.0)))
        eta = max(10.0, math.sqrt(n), float(np.max(rown, initial=0.0)),
                  float(np.linalg.norm(op.C[k])))
        X.append(xi * np.eye(n))
        Z.append(eta * np.eye(n))
    x_f = np.zeros(nf)
    y = np.zeros(m)

    log = []
    status = MAX_ITER
    message = ""
    best = None
    it = 0
    bnorm = 1.0 + float(np.max(np.abs(b), initial=0.0))
    cnorm = 1.0 + float(np.max(np.abs(problem.c), initial=0.0))

    def state_metrics():
        r_p = b - op.apply(x_f, X)
        aty_f, aty = op.adjoint(y)
        r_f = op.cf - aty_f
        R_d = [op.C[k] - aty[k] - Z[k] for k in range(len(blocks))]
        pobj = float(op.cf @ x_f) + sum(float(np.sum(op.C[k] * X[k])) for k in range(len(blocks)))
        dobj = float(b @ y)
        comp = sum(float(np.sum(X[k] * Z[k])) for k in range(len(blocks)))
        pres = float(np.max(np.abs(r_p), initial=0.0))
        dres = max(float(np.max(np.abs(r_f), initial=0.0)),
                   max((float(np.max(np.abs(R))) for R in R_d), default=0.0))
        gap = max(abs(pobj - dobj), abs(comp)) / (1.0 + abs(pobj) + abs(dobj))
        return r_p, r_f, R_d, pobj, dobj, comp, pres, dres, gap

    for it in range(max_iter + 1):
        r_p, r_f, R_d, pobj, dobj, comp, pres, dres, gap = state_metrics()
        log.append({"iter": it, "pobj": pobj, "dobj": dobj, "gap": comp,
                    "rel_gap": gap, "primal_eq": pres, "dual": dres})
        if verbose:
            logger.info("%3d pobj=% .10e dobj=% .10e gap=%.3e pres=%.3e dres=%.3e",
                        it, pobj, dobj, comp, pres, dres)
        score = max(pres / bnorm, dres / cnorm, gap)
        if best is None or score < best[0]:
            best = (score, x_f.copy(), [M.copy() for M in X], y.copy(), [M.copy() for M in Z], it)
        if pres <= tol and dres <= tol and gap <= tol:
            status = OPTIMAL
            break
        if it == max_iter:
            break
        # crude infeasibility / unboundedness detection
        if dobj > 1e10 * bnorm and dres <= 1e-6 * cnorm * max(1.0, abs(dobj)):
            status, message = INFEASIBLE, "dual objective diverges (primal infeasible)"
            break
        if pobj < -1e10 * cnorm and pres <= 1e-6 * bnorm * max(1.0, abs(pobj)):
            status, message = UNBOUNDED, "primal objective diverges (dual infeasible)"
            break
        verdict = _divergence(log)
        if verdict:
            status, message = verdict
            break

        mu = comp / ntot
        try:
            Zi = [_inv_spd(Zk) for Zk in Z]
            Mmat = op.schur(X, Zi)
            kkt = _factor_kkt(Mmat, op.Af)
        except (np.linalg.LinAlgError, sla.LinAlgError, ValueError) as exc:
            status, message = NUMERICAL, f"Schur factorization failed at iteration {it}: {exc}"
            break

        def direction(K):
            # dX = K - X dZ Zi ; dZ = R_d - A^*(dy)
            base = [K[k] - X[k] @ R_d[k] @ Zi[k] for k in range(len(blocks))]
            base = [0.5 * (B + B.T) for B in base]
            h = r_p - op.apply(np.zeros(nf), base)
            dxf, dy = _solve_kkt(kkt, op.Af, h, r_f, Mmat)
            _, atdy = op.adjoint(dy)
            dZ = [R_d[k] - atdy[k] for k in range(len(blocks))]
            dX = [K[k] - X[k] @ dZ[k] @ Zi[k] for k in range(len(blocks))]
            dX = [0.5 * (D + D.T) for D in dX]
            # refine against the exact operator: the assembled M drifts from it
            # once X Z^-1 is badly conditioned, which stalls primal feasibility
            defect = r_p - op.apply(dxf, dX)
            size = float(np.max(np.abs(defect), initial=0.0))
            for _ in range(2):
                if size <= 1e-3 * tol:
                    break
                cxf, cy = _solve_kkt(kkt, op.Af, defect, np.zeros(nf), Mmat)
                _, atc = op.adjoint(cy)
                cX = [X[k] @ atc[k] @ Zi[k] for k in range(len(blocks))]
                cand = (dxf + cxf, [dX[k] + 0.5 * (cX[k] + cX[k].T) for k in range(len(blocks))])
                new_defect = r_p - op.apply(*cand)
                new_size = float(np.max(np.abs(new_defect), initial=0.0))
                if new_size >= size:  # correction built from a poor M; keep what we have
                    break
                dxf, dX = cand
                dy = dy + cy
                dZ = [dZ[k] - atc[k] for k in range(len(blocks))]
                defect, size = new_defect, new_size
            return dxf, dX, dy, dZ

        # predictor
        K_aff = [-X[k] for k in range(len(blocks))]
        dxf_a, dX_a, dy_a, dZ_a = direction(K_aff)
        ap = min([1.0] + [_max_step(X[k], dX_a[k]) for k in range(len(blocks))])
        ad = min([1.0] + [_max_step(Z[k], dZ_a[k]) for k in range(len(blocks))])
        comp_aff = sum(float(np.sum((X[k] + ap * dX_a[k]) * (Z[k] + ad * dZ_a[k])))
                       for k in range(len(blocks)))
        sigma = min(1.0, max(0.0, comp_aff / comp)) ** 3 if comp > 0 else 0.0
        # corrector
        K = [sigma * mu * Zi[k] - X[k] - dX_a[k] @ dZ_a[k] @ Zi[k] for k in range(len(blocks))]
        dxf, dX, dy, dZ = direction(K)
        ap_max = min([math.inf] + [_max_step(X[k], dX[k]) for k in range(len(blocks))])
        ad_max = min([math.inf] + [_max_step(Z[k], dZ[k]) for k in range(len(blocks))])
        gamma = 0.9 + 0.09 * min(1.0, ap_max, ad_max)
        ap = min(1.0, gamma * ap_max)
        ad = min(1.0, gamma * ad_max)

        # accept only steps that do not increase the complementarity gap
        def trial(dX, dZ, ap, ad, tries):
            for _ in range(tries):
                newX = [X[k] + ap * dX[k] for k in range(len(blocks))]
                newZ = [Z[k] + ad * dZ[k] for k in range(len(blocks))]
                new_comp = sum(float(np.sum(newX[k] * newZ[k])) for k in range(len(blocks)))
                if new_comp <= comp or not blocks:
                    return newX, newZ, ap, ad
                ap *= 0.8
                ad *= 0.8
            return None

        got = trial(dX, dZ, ap, ad, 10)
        if got is None:
            # plain centred direction, common step: the gap is linear-decreasing to first order
            K = [0.5 * mu * Zi[k] - X[k] for k in range(len(blocks))]
            dxf, dX, dy, dZ = direction(K)
            a = min([1.0] + [_max_step(X[k], dX[k]) for k in range(len(blocks))]
                    + [_max_step(Z[k], dZ[k]) for k in range(len(blocks))])
            got = trial(dX, dZ, 0.95 * a, 0.95 * a, 60)
        if got is None:
            status, message = NUMERICAL, f"no gap-decreasing step at iteration {it}"
            break
        newX, newZ, ap, ad = got
        if max(ap, ad) < 1e-12:
            status, message = NUMERICAL, f"step length collapsed at iteration {it}"
            break
        X = newX
        Z = newZ
        x_f = x_f + ap * dxf
        y = y + ad * dy

    if status != OPTIMAL and best is not None:
        _, x_f, X, y, Z, _ = best
    sol = SdpSolution(free_values=x_f, block_matrices=X, equality_duals=y, status=status,
                      residuals={}, iterations=it, dual_slacks=Z, log=log, message=message)
    sol.residuals = residuals(problem, sol)
    sol.primal_objective = float(op.cf @ x_f) + sum(float(np.sum(op.C[k] * X[k]))
                                                   for k in range(len(blocks)))
    sol.dual_objective = float(b @ y)
    return sol


def _divergence(log, window=5):
    """Flag one objective running off geometrically while the other side's
    residual is stuck and its own residual is already small."""
    if len(log) <= window:
        return None
    recent = log[-window - 1:]

    def runaway(key, sign, other):
        vals = [sign * r[key] for r in recent]
        return vals[0] > 0 and all(b > 1.5 * a for a, b in zip(vals, vals[1:])) \
            and vals[-1] > 1e3 * (1.0 + abs(recent[-1][other]))

    def stuck(key):
        return recent[-1][key] > 0.5 * recent[0][key] and recent[-1][key] > 1e-6

    if runaway("dobj", 1.0, "pobj") and stuck("primal_eq") and recent[-1]["dual"] <= 1e-6 * abs(recent[-1]["dobj"]):
        return INFEASIBLE, "dual objective diverges while the primal residual stalls"
    if runaway("pobj", -1.0, "dobj") and stuck("dual") and recent[-1]["primal_eq"] <= 1e-6 * abs(recent[-1]["pobj"]):
        return UNBOUNDED, "primal objective diverges while the dual residual stalls"
    return None


def _factor_kkt(M, Af):
    """Factor the KKT matrix ``[[M, A_f], [A_f^T, 0]]``; returns a solver closure.

    Factoring the augmented matrix directly (rather than eliminating the free
    variables through ``A_f^T M^{-1} A_f``) avoids squaring the condition
    number near the optimum, where ``M`` becomes nearly singular.
    """
    m = M.shape[0]
    nf = 0 if Af is None else Af.shape[1]
    if m == 0:
        return lambda h, r_f: (np.zeros(nf), np.zeros(0))
    if nf == 0:
        scale = float(np.max(np.abs(np.diag(M)), initial=1.0))
        reg = 0.0
        for attempt in range(6):
            try:
                chol = sla.cho_factor(M + reg * np.eye(m) if reg else M, lower=True,
                                      check_finite=False)
                break
            except sla.LinAlgError:
                reg = scale * 10.0 ** (-14 + 2 * attempt)
        else:
            raise np.linalg.LinAlgError("Schur complement is not positive definite")
        return lambda h, r_f: (np.zeros(0), sla.cho_solve(chol, h, check_finite=False))
    K = np.zeros((m + nf, m + nf))
    K[:m, :m] = M
    K[:m, m:] = Af
    K[m:, :m] = Af.T
    scale = max(float(np.max(np.abs(np.diag(M)), initial=0.0)), 1.0)
    diag = np.arange(m + nf)
    sign = np.concatenate([np.ones(m), -np.ones(nf)])
    lu = None
    for attempt in range(7):
        # quasi-definite regularisation only when the plain matrix is singular
        reg = 0.0 if attempt == 0 else scale * 10.0 ** (-15 + 2 * attempt)
        Kr = K
        if reg:
            Kr = K.copy()
            Kr[diag, diag] += reg * sign
        with warnings.catch_warnings():
            warnings.simplefilter("error", sla.LinAlgWarning)
            try:
                lu = sla.lu_factor(Kr, check_finite=False)
            except (sla.LinAlgWarning, ValueError):
                continue
        piv = np.abs(np.diag(lu[0]))
        if np.all(np.isfinite(lu[0])) and piv.min() > 1e-300:
            break
    else:
        raise np.linalg.LinAlgError("KKT matrix is singular")

    def solve_kkt(h, r_f):
        sol = sla.lu_solve(lu, np.concatenate([h, r_f]), check_finite=False)
        return sol[m:], sol[:m]
    return solve_kkt


def _solve_kkt(kkt, Af, h, r_f, M, refine=3):
    """Solve ``M dy + A_f dxf = h``, ``A_f^T dy = r_f`` with iterative refinement."""
    dxf, dy = kkt(h, r_f)
    if dy.size == 0:
        return dxf, dy
    scale = 1.0 + float(np.max(np.abs(h), initial=0.0)) + float(np.max(np.abs(r_f), initial=0.0))
    for _ in range(refine):
        e1 = h - M @ dy
        e2 = np.zeros(0)
        if Af is not None:
            e1 -= Af @ dxf
            e2 = r_f - Af.T @ dy
        err = max(float(np.max(np.abs(e1), initial=0.0)), float(np.max(np.abs(e2), initial=0.0)))
        if err <= 1e-15 * scale:
            break
        cx, cy = kkt(e1, e2)
        dxf = dxf + cx
        dy = dy + cy
    return dxf, dy
