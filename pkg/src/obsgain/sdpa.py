"""SDPA sparse (``.dat-s``) export and import.

Our primal ``min <C, X> s.t. <A_i, X> = b_i`` is SDPA's dual problem
``max F_0 . Y s.t. F_i . Y = c_i``, so the file carries ``c := b``,
``F_0 := -C`` and ``F_i := A_i``. Free variables are written as a leading
diagonal block (negative size) and tagged by a ``* free-block`` comment so
that import can restore them; without the tag a diagonal block is read as
that many 1x1 PSD blocks, which is SDPA's own meaning.
"""
from __future__ import annotations

import re

import numpy as np
import scipy.sparse as sp

from .sdp import SdpProblem

__all__ = ["export_sdpa", "import_sdpa", "SdpaFormatError", "write_sdpa", "read_sdpa"]

FREE_TAG = "* free-block"


class SdpaFormatError(ValueError):
    def __init__(self, msg, line=None):
        if line is not None:
            msg = f"line {line}: {msg}"
        super().__init__(msg)
        self.line = line


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def _upper_index(i, j, n):
    return i * n - i * (i - 1) // 2 + (j - i)


def export_sdpa(problem: SdpProblem) -> str:
    nf = problem.num_free
    blocks = list(problem.blocks)
    struct = ([-nf] if nf else []) + blocks
    lines = ['"obsgain SDP: min <C,X> s.t. <A_i,X> = b_i, written as SDPA dual (F0 = -C)"']
    if nf:
        lines.append(FREE_TAG)
    lines.append(str(problem.num_constraints))
    lines.append(str(len(struct)))
    lines.append(" ".join(str(s) for s in struct))
    lines.append(" ".join(_fmt(v) for v in problem.b))

    # map each column to (sdpa block, i, j)
    col_blk, col_i, col_j = [], [], []
    if nf:
        col_blk += [1] * nf
        col_i += list(range(1, nf + 1))
        col_j += list(range(1, nf + 1))
    first = 2 if nf else 1
    for k, n in enumerate(blocks):
        iu, ju = np.triu_indices(n)
        col_blk += [first + k] * iu.size
        col_i += list(iu + 1)
        col_j += list(ju + 1)
    col_blk = np.array(col_blk, dtype=np.int64)
    col_i = np.array(col_i, dtype=np.int64)
    col_j = np.array(col_j, dtype=np.int64)

    out = []
    for col in np.flatnonzero(problem.c):
        out.append((0, col_blk[col], col_i[col], col_j[col], -problem.c[col]))
    A = problem.A.tocsr()
    for r in range(A.shape[0]):
        lo, hi = A.indptr[r], A.indptr[r + 1]
        for col, v in zip(A.indices[lo:hi], A.data[lo:hi]):
            if v != 0.0:
                out.append((r + 1, col_blk[col], col_i[col], col_j[col], v))
    out.sort(key=lambda t: t[:4])
    for mat, blk, i, j, v in out:
        lines.append(f"{mat} {blk} {i} {j} {_fmt(v)}")
    return "\n".join(lines) + "\n"


_PUNCT = re.compile(r"[{}(),]")


def import_sdpa(text: str) -> SdpProblem:
    raw = text.splitlines()
    free_tagged = False
    body = []  # (line number, content)
    started = False
    for lineno, line in enumerate(raw, 1):
        s = line.strip()
        if not started:
            if not s:
                continue
            if s.startswith('"') or s.startswith("*"):
                if s.startswith(FREE_TAG):
                    free_tagged = True
                continue
            started = True
        body.append((lineno, s))

    def header_tokens(idx):
        while idx < len(body):
            lineno, s = body[idx]
            toks = _PUNCT.sub(" ", s).split()
            idx += 1
            if toks:
                return lineno, toks, idx
        raise SdpaFormatError("unexpected end of file in header")

    pos = 0
    lineno, toks, pos = header_tokens(pos)
    try:
        m = int(toks[0])
    except ValueError:
        raise SdpaFormatError(f"bad constraint count {toks[0]!r}", lineno) from None
    lineno, toks, pos = header_tokens(pos)
    try:
        nblocks = int(toks[0])
    except ValueError:
        raise SdpaFormatError(f"bad block count {toks[0]!r}", lineno) from None
    if m < 0 or nblocks < 0:
        raise SdpaFormatError("negative counts", lineno)

    if nblocks:
        lineno, toks, pos = header_tokens(pos)
        try:
            struct = [int(float(t)) for t in toks]
        except ValueError:
            raise SdpaFormatError("non-integer block size", lineno) from None
        if len(struct) != nblocks or any(s == 0 for s in struct):
            raise SdpaFormatError(
                f"block structure lists {len(struct)} sizes, header declares {nblocks}", lineno)
    else:
        struct = []

    cvec = []
    while len(cvec) < m:
        lineno, toks, pos = header_tokens(pos)
        try:
            cvec.extend(float(t) for t in toks)
        except ValueError:
            raise SdpaFormatError("bad objective vector entry", lineno) from None
    if len(cvec) != m:
        raise SdpaFormatError(f"objective vector has {len(cvec)} entries, expected {m}", lineno)

    # build our block layout
    num_free = 0
    layout = []  # per sdpa block: list of (kind, our block index or None)
    psd = []
    for k, s in enumerate(struct):
        if s < 0 and k == 0 and free_tagged:
            num_free = -s
            layout.append(("free", None))
        elif s < 0:
            layout.append(("diag", len(psd)))
            psd.extend([1] * (-s))
        else:
            layout.append(("psd", len(psd)))
            psd.append(s)
    offs = [num_free]
    for n in psd:
        offs.append(offs[-1] + n * (n + 1) // 2)
    nvar = offs[-1]

    rows, cols, vals = [], [], []
    cobj = np.zeros(nvar)
    for lineno, s in body[pos:]:
        toks = _PUNCT.sub(" ", s).split()
        if not toks or s.startswith("*") or s.startswith('"'):
            continue
        if len(toks) != 5:
            raise SdpaFormatError(f"expected 'matno blkno i j value', got {s!r}", lineno)
        try:
            mat, blk, i, j = (int(t) for t in toks[:4])
            v = float(toks[4])
        except ValueError:
            raise SdpaFormatError(f"malformed entry {s!r}", lineno) from None
        if not 0 <= mat <= m:
            raise SdpaFormatError(f"matrix number {mat} out of range", lineno)
        if not 1 <= blk <= len(struct):
            raise SdpaFormatError(f"block number {blk} out of range", lineno)
        size = abs(struct[blk - 1])
        if not (1 <= i <= size and 1 <= j <= size):
            raise SdpaFormatError(f"entry ({i},{j}) outside block of size {size}", lineno)
        if i > j:
            i, j = j, i
        kind, ours = layout[blk - 1]
        if kind in ("free", "diag") and i != j:
            raise SdpaFormatError("off-diagonal entry in a diagonal block", lineno)
        if kind == "free":
            col = i - 1
        elif kind == "diag":
            col = offs[ours + i - 1]
        else:
            col = offs[ours] + _upper_index(i - 1, j - 1, struct[blk - 1])
        if mat == 0:
            cobj[col] -= v
        else:
            rows.append(mat - 1)
            cols.append(col)
            vals.append(v)
    A = sp.csr_matrix((vals, (rows, cols)), shape=(m, nvar))
    return SdpProblem(tuple(psd), num_free, A, np.array(cvec), cobj)


def write_sdpa(problem: SdpProblem, path) -> None:
    with open(path, "w") as fh:
        fh.write(export_sdpa(problem))


def read_sdpa(path) -> SdpProblem:
    with open(path) as fh:
        return import_sdpa(fh.read())
