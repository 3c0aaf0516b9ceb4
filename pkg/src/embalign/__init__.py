"""embalign: rotational alignment of independent embedding spaces and
spoofing evaluation of the resulting template attacks."""

from .alignment import (
    AlignmentResult,
    FinetuneConfig,
    WassersteinConfig,
    cluster_center_procrustes,
    finetune_rotation,
    identity_alignment,
    oracle_procrustes,
    orthogonal_procrustes,
    wasserstein_procrustes,
)
from .core import (
    EmbeddingSet,
    Rotation,
    apply_alignment,
    derive_seed,
    random_rotation,
)
from .gmm import GmmModel, fit_gmm, gmm_loglik, log_gaussian, score_set, symmetric_score
from .io import load_embeddings, save_embeddings
from .metrics import (
    AttackReport,
    TrialScores,
    build_trials,
    classification_accuracy,
    compute_eer,
    compute_sfar,
    cosine,
    evaluate_attack,
    far_threshold,
)
from .synth import WorldConfig, WorldOutput, generate_world, split_disjoint
from .transport import Coupling, exact_assignment, sinkhorn

__version__ = "0.1.0"

__all__ = [
    "AlignmentResult",
    "AttackReport",
    "Coupling",
    "EmbeddingSet",
    "FinetuneConfig",
    "GmmModel",
    "Rotation",
    "TrialScores",
    "WassersteinConfig",
    "WorldConfig",
    "WorldOutput",
    "apply_alignment",
    "build_trials",
    "classification_accuracy",
    "cluster_center_procrustes",
    "compute_eer",
    "compute_sfar",
    "cosine",
    "derive_seed",
    "evaluate_attack",
    "exact_assignment",
    "far_threshold",
    "finetune_rotation",
    "fit_gmm",
    "generate_world",
    "gmm_loglik",
    "identity_alignment",
    "load_embeddings",
    "log_gaussian",
    "oracle_procrustes",
    "orthogonal_procrustes",
    "random_rotation",
    "save_embeddings",
    "score_set",
    "sinkhorn",
    "split_disjoint",
    "symmetric_score",
    "wasserstein_procrustes",
]
