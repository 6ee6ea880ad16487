"""Soft-label knowledge distillation of a pretrained base model into a
smaller student (different embedding dim and/or MLP widths)."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from .metrics import auc, precision
from .model import (
    Arch,
    ParamSet,
    backward_batch,
    bce_loss,
    count_params,
    forward_batch,
    init_params,
    sgd_step,
)


class DistillError(ValueError):
    pass


@dataclass(frozen=True)
class DistillConfig:
    embed_dim: int
    mlp_hidden: Tuple[int, ...]
    epochs: int = 20
    lr: float = 0.1
    batch_size: int = 64
    alpha: float = 0.5  # weight of the soft-label term; 1.0 ignores true labels
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise DistillError(f"alpha {self.alpha} outside [0, 1]")


@dataclass
class DistillHistory:
    train_loss: List[float]
    holdout_mse: List[float]  # student-vs-teacher prediction MSE, if holdout given


def distill_targets(teacher_probs: np.ndarray, labels: Optional[np.ndarray], alpha: float) -> np.ndarray:
    """Blended target alpha * teacher + (1 - alpha) * y.

    The gradient of alpha*BCE(p, teacher) + (1-alpha)*BCE(p, y) w.r.t. the
    logit equals that of BCE against this blended target, so training reuses
    the ordinary backward pass. With alpha = 1 the labels are never read.
    """
    if alpha == 1.0:
        return teacher_probs
    if labels is None:
        raise DistillError("labels required when alpha < 1")
    return alpha * teacher_probs + (1.0 - alpha) * labels


def distill(
    teacher: ParamSet,
    UA: np.ndarray,
    VA: np.ndarray,
    labels: Optional[np.ndarray],
    config: DistillConfig,
    holdout: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> Tuple[ParamSet, DistillHistory]:
    """Train a fresh student base model against the teacher's predicted
    probabilities (optionally mixed with true labels). Returns the student
    ParamSet, ready to warm-start a federated run."""
    student_arch = replace(
        teacher.arch.base(), embed_dim=config.embed_dim, mlp_hidden=tuple(config.mlp_hidden)
    )
    student = init_params(student_arch, config.seed)
    if count_params(student) >= count_params(teacher):
        raise DistillError(
            f"student ({count_params(student)} params) not smaller than teacher ({count_params(teacher)})"
        )

    teacher_probs, _ = forward_batch(teacher, UA, VA)
    history = DistillHistory([], [])
    rng = np.random.default_rng([config.seed, 13])
    n = len(UA)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            target = distill_targets(
                teacher_probs[idx], None if labels is None else labels[idx], config.alpha
            )
            probs, cache = forward_batch(student, UA[idx], VA[idx], want_cache=True)
            epoch_loss += bce_loss(probs, target) * len(idx)
            grads = backward_batch(student, cache, target)
            student = sgd_step(student, grads, config.lr)
        history.train_loss.append(epoch_loss / n)
        if holdout is not None:
            h_ua, h_va = holdout
            sp, _ = forward_batch(student, h_ua, h_va)
            tp, _ = forward_batch(teacher, h_ua, h_va)
            history.holdout_mse.append(float(np.mean((sp - tp) ** 2)))
    return student, history


def compare_models(
    model_a: ParamSet, model_b: ParamSet, UA: np.ndarray, VA: np.ndarray, labels: np.ndarray
) -> Tuple[float, float]:
    """(AUC_A - AUC_B, Precision_A - Precision_B) on one evaluation batch."""
    pa, _ = forward_batch(model_a, UA, VA)
    pb, _ = forward_batch(model_b, UA, VA)
    return auc(pa, labels) - auc(pb, labels), precision(pa, labels) - precision(pb, labels)
