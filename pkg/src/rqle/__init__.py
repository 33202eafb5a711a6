"""Robust quasi-likelihood estimation of isoform expression from RNA-seq read-type counts."""

from .dispersion import estimate_phi_cohort, fit_single_gene
from .estimator import poisson_mle_em, rqle_estimate
from .model import GeneModel, Method, RobustConfig, ThetaEstimate, make_gene
from .score import expected_nu, objective, score_vector

__all__ = [
    "GeneModel", "Method", "RobustConfig", "ThetaEstimate", "make_gene",
    "expected_nu", "objective", "score_vector",
    "poisson_mle_em", "rqle_estimate",
    "estimate_phi_cohort", "fit_single_gene",
]
__version__ = "0.1.0"
