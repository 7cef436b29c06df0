"""Clusterpath estimation of Gaussian graphical models.

Joint variable clustering and sparse estimation of precision (or covariance)
matrices by penalized maximum likelihood, solved with cyclic block
coordinate descent on the G-block parameterization.
"""

from .blockmodel import (
    BlockParameters,
    ClusterAssignment,
    NotPositiveDefiniteError,
    PrecisionModel,
    block_inverse,
    log_det,
    materialize,
    singleton_model,
    trace_term,
)
from .clusterpath import ClusterpathSolution, compute_path, dendrogram, dendrogram_newick, refit
from .modelsel import CvPlan, CvResult, select
from .optimizer import FitResult, SolverSettings, fit
from .penalty import PenaltyConfig, build_weights, default_sparsity_weights
from .simbench import DesignSpec, evaluate, generate, run_study

__version__ = "0.1.0"

__all__ = [
    "BlockParameters",
    "ClusterAssignment",
    "ClusterpathSolution",
    "CvPlan",
    "CvResult",
    "DesignSpec",
    "FitResult",
    "NotPositiveDefiniteError",
    "PenaltyConfig",
    "PrecisionModel",
    "SolverSettings",
    "block_inverse",
    "build_weights",
    "compute_path",
    "default_sparsity_weights",
    "dendrogram",
    "dendrogram_newick",
    "evaluate",
    "fit",
    "generate",
    "log_det",
    "materialize",
    "refit",
    "run_study",
    "select",
    "singleton_model",
    "trace_term",
]
