"""Estimator-style front end: ``fit`` on a problem, then query ``w_d`` and beta."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .gains import GridSpec, beta_table, select_gains
from .problem import ObserverProblem
from .sdp import solve
from .sos import compile_dual, recover_certificate

__all__ = ["ObserverGainSynthesizer", "check_problem"]


def check_problem(problem) -> ObserverProblem:
    if not isinstance(problem, ObserverProblem):
        raise TypeError(f"expected an ObserverProblem, got {type(problem).__name__}")
    return problem


class ObserverGainSynthesizer(BaseEstimator):
    """Solve the degree-``degree`` relaxation and rank gains by beta.

    After ``fit``: ``certificate_``, ``layout_``, ``solution_``,
    ``ranking_`` and ``best_gain_``. Rows passed to ``decision_function`` and
    ``predict`` are ``(e, l)`` pairs; rows passed to ``transform`` are gains.
    """

    def __init__(self, degree=4, k=1000, grid_e=201, grid_l=101, tol=1e-7, max_iter=200,
                 threads=1, select=True):
        self.degree = degree
        self.k = k
        self.grid_e = grid_e
        self.grid_l = grid_l
        self.tol = tol
        self.max_iter = max_iter
        self.threads = threads
        self.select = select

    def fit(self, problem, y=None):
        problem = check_problem(problem)
        if int(self.k) != self.k or self.k < 1:
            raise ValueError(f"k must be an integer >= 1, got {self.k}")
        sdp, layout = compile_dual(problem, self.degree)
        self.solution_ = solve(sdp, tol=self.tol, max_iter=self.max_iter)
        self.certificate_ = recover_certificate(layout, self.solution_)
        self.layout_ = layout
        self.problem_ = problem
        self.n_features_in_ = len(problem.e_vars) + len(problem.l_vars)
        self.egrid_ = GridSpec.over(problem.E, self.grid_e)
        if self.select:
            lgrid = GridSpec.over(problem.L, self.grid_l)
            self.ranking_ = select_gains(self.certificate_, lgrid, self.egrid_, self.k,
                                         threads=self.threads)
            self.best_gain_ = self.ranking_.selected
        return self

    def _split(self, X):
        check_is_fitted(self, "certificate_")
        X = check_array(X, ensure_min_samples=1)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} columns (e, l), got {X.shape[1]}")
        ne = len(self.problem_.e_vars)
        return X[:, :ne], X[:, ne:]

    def decision_function(self, X):
        """``w_d(e, l)`` for each row."""
        e, l = self._split(X)
        return self.certificate_.w_values(e, l)

    def predict(self, X):
        """1 where ``w_d >= 1`` (candidate member of the admissible set), else 0."""
        return (self.decision_function(X) >= 1.0).astype(int)

    def transform(self, L):
        """beta at each gain row."""
        check_is_fitted(self, "certificate_")
        L = check_array(L, ensure_min_samples=1)
        if L.shape[1] != len(self.problem_.l_vars):
            raise ValueError(f"expected {len(self.problem_.l_vars)} gain columns, got {L.shape[1]}")
        return beta_table(self.certificate_, L, self.egrid_, int(self.k), threads=self.threads)

    def score(self, X, y=None):
        """Best beta among the given gain rows."""
        return float(np.max(self.transform(X)))
