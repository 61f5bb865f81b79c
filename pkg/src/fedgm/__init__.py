"""Desk-scale federated domain generalization with gradient matching."""

from .autodiff import Tape, backward, finite_diff_grad, op_apply
from .data import (
    AugmentationSpec,
    DomainDataset,
    amplitude_mix,
    augment,
    batch_iter,
    gen_rotated_domains,
    gen_textured_domains,
    mix_amplitude,
    train_test_split,
)
from .federation import (
    ClientUpdate,
    HyperParams,
    MetricsTable,
    PseudoLabeledSet,
    RoundMessage,
    aggregate,
    cosine_lr,
    evaluate,
    knowledge_vote,
    local_train,
    run_da,
    run_dg,
)
from .model import (
    HeadSnapshot,
    ModelParams,
    ParamNodes,
    flatten,
    forward,
    init_params,
    load_checkpoint,
    predict_logits,
    predict_proba,
    save_checkpoint,
    stage_params,
    unflatten,
)
from .objective import (
    LossBreakdown,
    cosine_sim,
    cross_entropy,
    head_grad,
    inter_gm_loss,
    intra_gm_loss,
    local_loss,
)

__version__ = "0.1.0"

__all__ = [
    "AugmentationSpec",
    "ClientUpdate",
    "DomainDataset",
    "HeadSnapshot",
    "HyperParams",
    "LossBreakdown",
    "MetricsTable",
    "ModelParams",
    "ParamNodes",
    "PseudoLabeledSet",
    "RoundMessage",
    "Tape",
    "aggregate",
    "amplitude_mix",
    "augment",
    "backward",
    "batch_iter",
    "cosine_lr",
    "cosine_sim",
    "cross_entropy",
    "evaluate",
    "finite_diff_grad",
    "flatten",
    "forward",
    "gen_rotated_domains",
    "gen_textured_domains",
    "head_grad",
    "init_params",
    "inter_gm_loss",
    "intra_gm_loss",
    "knowledge_vote",
    "load_checkpoint",
    "local_loss",
    "local_train",
    "mix_amplitude",
    "op_apply",
    "predict_logits",
    "predict_proba",
    "run_da",
    "run_dg",
    "save_checkpoint",
    "stage_params",
    "train_test_split",
    "unflatten",
]
