"""Schur-complement assembly kernels for the HKM direction.

``M[i, j] = tr(A_i X A_j Z^{-1})`` summed over PSD blocks. Constraint
matrices are given by their upper-triangular entries; each entry ``(a, b)``
carries the list of ``(row, value)`` pairs it appears in.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def schur_sparse(M, ptr, rows, vals, ei, ej, X, Zi):
    n_entries = ei.shape[0]
    for e in range(n_entries):
        a = ei[e]
        b = ej[e]
        for f in range(e, n_entries):
            c = ei[f]
            d = ej[f]
            v = X[b, c] * Zi[d, a] + X[b, d] * Zi[c, a] + X[a, c] * Zi[d, b] + X[a, d] * Zi[c, b]
            if a == b:
                v *= 0.5
            if c == d:
                v *= 0.5
            if v == 0.0:
                continue
            for p in range(ptr[e], ptr[e + 1]):
                rp = rows[p]
                vp = vals[p] * v
                for q in range(ptr[f], ptr[f + 1]):
                    rq = rows[q]
                    t = vp * vals[q]
                    M[rp, rq] += t
                    if f != e:
                        M[rq, rp] += t


def entry_structure(block_csc, n):
    """Group the nonzeros of an ``m x n(n+1)/2`` block slice by matrix entry."""
    iu, ju = np.triu_indices(n)
    block_csc = block_csc.tocsc()
    block_csc.sort_indices()
    counts = np.diff(block_csc.indptr)
    keep = np.flatnonzero(counts)
    ptr = np.zeros(keep.size + 1, dtype=np.int64)
    ptr[1:] = np.cumsum(counts[keep])
    rows = np.empty(ptr[-1], dtype=np.int64)
    vals = np.empty(ptr[-1])
    pos = 0
    for k in keep:
        lo, hi = block_csc.indptr[k], block_csc.indptr[k + 1]
        rows[pos:pos + hi - lo] = block_csc.indices[lo:hi]
        vals[pos:pos + hi - lo] = block_csc.data[lo:hi]
        pos += hi - lo
    return ptr, rows, vals, iu[keep].astype(np.int64), ju[keep].astype(np.int64)
