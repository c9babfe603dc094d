from .graph import (
    AttributeGraph,
    containing_clique,
    is_chordal,
    max_clique_domain,
    running_intersection,
    triangulate,
)
from .model import (
    FitResult,
    MRFModel,
    UnnormalizableModel,
    brute_force_joint,
    fit_theta,
    infer_marginal,
    sample,
)
from .scores import R_SCORE_SENSITIVITY, expected_abs_gaussian, r_score, theta_useful

__all__ = [
    "AttributeGraph",
    "FitResult",
    "MRFModel",
    "R_SCORE_SENSITIVITY",
    "UnnormalizableModel",
    "brute_force_joint",
    "containing_clique",
    "expected_abs_gaussian",
    "fit_theta",
    "infer_marginal",
    "is_chordal",
    "max_clique_domain",
    "r_score",
    "running_intersection",
    "sample",
    "theta_useful",
    "triangulate",
]
