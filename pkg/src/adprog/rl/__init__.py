from .gae import compute_gae
from .policy import GaussianMLPPolicy, MLP
from .train import (PolicyCheckpoint, SubjectInit, TrainConfig, collect_batch,
                    init_information, initializers_from_cohort, predict, train)
from .trpo import conjugate_gradient, trpo_update

__all__ = [
    "GaussianMLPPolicy", "MLP", "PolicyCheckpoint", "SubjectInit", "TrainConfig",
    "collect_batch", "compute_gae", "conjugate_gradient", "init_information",
    "initializers_from_cohort", "predict", "train", "trpo_update",
]
