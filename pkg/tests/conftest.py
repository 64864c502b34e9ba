import warnings

import numpy as np
import pytest
import scipy.sparse as sp

from obsgain.problem import ObserverProblem
from obsgain.sdp import SdpProblem, solve, svec, svec_weights
from obsgain.semialg import make_ball, make_box
from obsgain.sos import compile_dual, recover_certificate

# closed-form facts of the scalar fixture x' = -x, y = x on [0, 1]
SCALAR_A = -1.0
SCALAR_TARGET = 0.05
SCALAR_THRESHOLD = SCALAR_A + np.log(2.0 / (2 * SCALAR_TARGET))  # -1 + ln 20


def scalar_problem(L=(-10.0, 10.0)):
    return ObserverProblem.from_strings(
        ["-x1"], ["x1"],
        lambda r: make_box(r, ["x1"], [-1.0], [1.0]),
        lambda r: make_box(r, ["e1"], [-1.0], [1.0]),
        lambda r: make_box(r, ["e1"], [-SCALAR_TARGET], [SCALAR_TARGET]),
        lambda r: make_box(r, ["l1"], [L[0]], [L[1]]))


def planar_problem(f):
    return ObserverProblem.from_strings(
        f, ["x1"],
        lambda r: make_ball(r, ["x1", "x2"], [0, 0], 1.0),
        lambda r: make_ball(r, ["e1", "e2"], [0, 0], 1.0),
        lambda r: make_ball(r, ["e1", "e2"], [0, 0], 0.05),
        lambda r: make_ball(r, ["l1", "l2"], [0, 0], 10.0))


def linear_problem():
    return planar_problem(["-x1 - 3*x2", "-2*x1 - 6*x2"])


def bilinear_problem():
    return planar_problem(["-x1 + x1*x2", "-x2"])


def scalar_feasible_measure(l):
    """Lebesgue measure of {e0 in [-1, 1] : |e0| exp(a - l) <= 0.05}."""
    return np.minimum(2.0, 2 * SCALAR_TARGET * np.exp(np.asarray(l) - SCALAR_A))


def random_sdp(seed):
    """Feasible SDP with a known optimum built from a complementary pair (X*, Z*)."""
    rng = np.random.default_rng(seed)
    blocks = tuple(int(n) for n in rng.integers(1, 6, size=rng.integers(1, 4)))
    nf = int(rng.integers(0, 3))
    nvar = nf + sum(n * (n + 1) // 2 for n in blocks)
    m = int(rng.integers(nf + 1, max(nf + 2, nvar - 1)))
    A = rng.standard_normal((m, nvar)) * (rng.random((m, nvar)) < 0.6)
    xs, zs = [], []
    for n in blocks:
        Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
        r = int(rng.integers(0, n + 1))
        lam = np.concatenate([rng.uniform(0.5, 2, r), np.zeros(n - r)])
        nu = np.concatenate([np.zeros(r), rng.uniform(0.5, 2, n - r)])
        xs.append(svec(Q @ np.diag(lam) @ Q.T))
        zs.append(svec(Q @ np.diag(nu) @ Q.T))
    x = np.concatenate([rng.standard_normal(nf)] + xs)
    w = np.concatenate([np.ones(nf)] + [svec_weights(n) for n in blocks])
    y = rng.standard_normal(m)
    c = A.T @ y + np.concatenate([np.zeros(nf)] + zs)
    return SdpProblem(blocks, nf, sp.csr_matrix(A), A @ (w * x), c), float(c @ (w * x))


def solve_fixture(problem, d):
    sdp, layout = compile_dual(problem, d)
    sol = solve(sdp)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        cert = recover_certificate(layout, sol)
    return sdp, layout, sol, cert


_CACHE = {}


def cached(key, fn):
    if key not in _CACHE:
        _CACHE[key] = fn()
    return _CACHE[key]


@pytest.fixture(scope="session")
def scalar():
    return scalar_problem()


@pytest.fixture(scope="session")
def scalar_d4(scalar):
    return cached(("scalar", 4), lambda: solve_fixture(scalar, 4))


@pytest.fixture(scope="session")
def linear():
    return linear_problem()
