"""Observer gain synthesis for polynomial drift systems.

Typical use::

    from obsgain import ObserverProblem, ObserverGainSynthesizer, make_box
    est = ObserverGainSynthesizer(degree=4).fit(problem)
    est.best_gain_
"""
from .certificate import Certificate
from .estimator import ObserverGainSynthesizer
from .gains import GainRanking, GridSpec, beta, beta_table, select_gains, superlevel_set
from .poly import Polynomial, VariableRegistry, parse_polynomial
from .problem import ObserverProblem
from .sdp import SdpProblem, SdpSolution, solve
from .semialg import SemialgebraicSet, make_ball, make_box, product_set
from .sos import compile_dual, recover_certificate
from .validate import ValidationGrids, ValidationReport, containment_check, ground_truth

__version__ = "0.1.0"

__all__ = [
    "Certificate", "ObserverGainSynthesizer", "GainRanking", "GridSpec", "beta", "beta_table",
    "select_gains", "superlevel_set", "Polynomial", "VariableRegistry", "parse_polynomial",
    "ObserverProblem", "SdpProblem", "SdpSolution", "solve", "SemialgebraicSet", "make_ball",
    "make_box", "product_set", "compile_dual", "recover_certificate", "ValidationGrids",
    "ValidationReport", "containment_check", "ground_truth",
]
