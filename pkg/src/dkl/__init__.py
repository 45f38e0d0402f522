"""Decoupled KL-divergence losses with analytic gradients.

The KL loss between softmax outputs decomposes into a weighted MSE over
pairwise logit gaps plus a soft-label cross-entropy with matching
stop-gradients. This package implements that family (KL, the decoupled
form, its class-weighted asymmetry-broken variant, and a Jensen-Shannon
comparison loss), certifies every gradient against finite differences,
and exercises the losses in desk-scale knowledge-distillation and
adversarial-training loops.
"""

__version__ = "0.1.0"

from .class_stats import ClassStats, exact_recompute
from .data import Dataset, export_logits, gaussian_mixture, import_logits, load_csv, split
from .gradcheck import (
    GradReport,
    check_asymmetry,
    check_finite_differences,
    check_kl_dkl_equivalence,
    check_wmse_identity,
    finite_diff,
)
from .losses import (
    LossConfig,
    LossOutput,
    WeightSource,
    dkl_family,
    jsd_forward_backward,
    kl_backward,
    kl_forward,
    soft_ce,
    wmse_dense,
    wmse_efficient,
)
from .model import (
    MlpParams,
    SgdOptimizer,
    backward,
    cosine_lr,
    forward,
    init_mlp,
    load_params,
    save_params,
)
from .numerics import log_softmax, outer_weight, pairwise_diff, softmax
from .trainers import (
    AttackConfig,
    TrainConfig,
    TrainingDiverged,
    evaluate,
    pgd_attack,
    train_adversarial,
    train_baseline,
    train_distill,
)

__all__ = [
    "__version__",
    "AttackConfig",
    "ClassStats",
    "Dataset",
    "GradReport",
    "LossConfig",
    "LossOutput",
    "MlpParams",
    "SgdOptimizer",
    "TrainConfig",
    "TrainingDiverged",
    "WeightSource",
    "backward",
    "check_asymmetry",
    "check_finite_differences",
    "check_kl_dkl_equivalence",
    "check_wmse_identity",
    "cosine_lr",
    "dkl_family",
    "evaluate",
    "exact_recompute",
    "export_logits",
    "finite_diff",
    "forward",
    "gaussian_mixture",
    "import_logits",
    "init_mlp",
    "jsd_forward_backward",
    "kl_backward",
    "kl_forward",
    "load_csv",
    "load_params",
    "log_softmax",
    "outer_weight",
    "pairwise_diff",
    "pgd_attack",
    "save_params",
    "soft_ce",
    "softmax",
    "split",
    "train_adversarial",
    "train_baseline",
    "train_distill",
    "wmse_dense",
    "wmse_efficient",
]
