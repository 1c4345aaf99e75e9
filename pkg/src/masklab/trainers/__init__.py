"""Training loops: supervised policy, meta policy, Stage 1/2, evaluation."""
from .meta import (MetaConfig, batch_budget_loss, budget_loss, inner_finetune_step,
                   inner_pretrain_step, meta_loss, meta_objective, meta_outer_step,
                   replay_pretrain, run_meta_training)
from .optim import Adam, SGD, loss_and_grads, make_optimizer, triangular_lr
from .stages import (CSV_HEADER, EvalReport, StageConfig, em_score, evaluate, exact_match,
                     finetune, intermediate_pretrain, normalize_answer, predict)
from .supervised import SupConfig, make_label, span_accuracy, train_supervised_policy

__all__ = [
    "MetaConfig", "batch_budget_loss", "budget_loss", "inner_finetune_step",
    "inner_pretrain_step", "meta_loss", "meta_objective", "meta_outer_step",
    "replay_pretrain", "run_meta_training", "Adam", "SGD", "loss_and_grads",
    "make_optimizer", "triangular_lr", "CSV_HEADER", "EvalReport", "StageConfig",
    "em_score", "evaluate", "exact_match", "finetune", "intermediate_pretrain",
    "normalize_answer", "predict", "SupConfig", "make_label", "span_accuracy",
    "train_supervised_policy",
]
