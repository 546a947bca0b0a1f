"""Predictive confidence for face-verification embeddings, on a synthetic world."""

__version__ = "0.1.0"

from .confnet import ConfidenceModel, ConfidenceRegressor, TrainConfig, loss, loss_gradient, train
from .embedsim import WorldConfig, apply_degradation, generate_world, oracle_confidence
from .fusion import FaceSet, SetFuser, fuse, set_verification
from .metrics import correlation_bins, error_vs_reject, roc_summary, tar_at_far
from .pairgen import SubspaceRecognizer, cosine_similarity, score_mated_pairs, split_folds

__all__ = [
    "ConfidenceModel",
    "ConfidenceRegressor",
    "FaceSet",
    "SetFuser",
    "SubspaceRecognizer",
    "TrainConfig",
    "WorldConfig",
    "apply_degradation",
    "correlation_bins",
    "cosine_similarity",
    "error_vs_reject",
    "fuse",
    "generate_world",
    "loss",
    "loss_gradient",
    "oracle_confidence",
    "roc_summary",
    "score_mated_pairs",
    "set_verification",
    "split_folds",
    "tar_at_far",
    "train",
]
