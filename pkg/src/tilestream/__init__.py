"""Streaming manifold tiling with multi-step probabilistic prediction.

Pipeline: sparse random projection and a stably rotated streaming SVD reduce
high-dimensional observations to a few dimensions; a Gaussian mixture with
Markov transitions between components is then fitted online and queried for
T-step-ahead predictive densities and transition entropies.
"""
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import (DataError, FilterDegenerate, FormatError, InsufficientDataError,
                     IntegrationDiverged, NumericalError, RankDeficientError, ShapeError)
from .model import (Hyperparameters, Model, elbo, elbo_gradient, forward_filter,
                    gaussian_logpdf, init_model, update_suff_stats)
from .predict import (MetricsSeries, ModelSnapshot, entropy, eval_stream, log_pred_prob,
                      predict_mixture, random_walk_baseline)
from .reduce import (ProSVD, Reducer, SparseProjection, build_projection, principal_angles,
                     project, prosvd_init, prosvd_project, prosvd_update)
from .simulate import TrajectoryConfig, generate, lift, load_matrix, stream, write_matrix

__version__ = "0.1.0"

__all__ = [
    "DataError", "FilterDegenerate", "FormatError", "Hyperparameters",
    "InsufficientDataError", "IntegrationDiverged", "MetricsSeries", "Model",
    "ModelSnapshot", "NumericalError", "ProSVD", "RankDeficientError", "Reducer",
    "ShapeError", "SparseProjection", "TrajectoryConfig", "build_projection", "elbo",
    "elbo_gradient", "entropy", "eval_stream", "forward_filter", "gaussian_logpdf",
    "generate", "init_model", "lift", "load_checkpoint", "load_matrix", "log_pred_prob",
    "predict_mixture", "principal_angles", "project", "prosvd_init", "prosvd_project",
    "prosvd_update", "random_walk_baseline", "save_checkpoint", "stream",
    "update_suff_stats", "write_matrix",
]
