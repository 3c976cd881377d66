"""
Robust distillation objectives built from two primitives, soft-target
cross-entropy and KL divergence.

KL direction: ``kl_divergence(student, teacher)`` computes KL(teacher || student),
so a loss written ``KL(f_S(x), f_T(x))`` means "pull the student toward the
teacher". No distillation temperature is used. All losses are batch means.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import LOG_FLOOR, Tensor
from .errors import ConfigError, DomainError, ShapeError
from .models import BoundEnsemble, ProbabilityModel

ROW_TOLERANCE = 1e-9


class LossTag(str, Enum):
    CE = "CE"
    CKD = "CKD"
    ARD = "ARD"
    RSLAD = "RSLAD"
    RSLAD_LM = "RSLAD_LM"
    AKD = "AKD"
    ENSEMBLE_AKD = "ENSEMBLE_AKD"


@dataclass(frozen=True)
class LossVariant:
    tag: LossTag = LossTag.CE
    lam: float = 0.0
    alpha: float = 1.0

    def __post_init__(self):
        try:
            object.__setattr__(self, "tag", LossTag(self.tag))
        except ValueError:
            raise ConfigError("loss.tag", f"unknown loss '{self.tag}'") from None
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("loss.lambda", f"{self.lam} is outside [0, 1]")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("loss.alpha", f"{self.alpha} is outside [0, 1]")

    @property
    def requires_teacher(self) -> bool:
        return self.tag is not LossTag.CE

    @property
    def requires_ensemble(self) -> bool:
        return self.tag is LossTag.ENSEMBLE_AKD


@dataclass(frozen=True, eq=False)
class SoftTarget:
    """Batch of target distributions; rows are nonnegative and sum to one."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64)
        if probs.ndim != 2:
            raise ShapeError("soft_target", [probs.shape], "expected batch x classes")
        if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > ROW_TOLERANCE):
            raise DomainError("soft target rows must be nonnegative and sum to 1")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)


def one_hot(labels: np.ndarray, num_classes: int) -> SoftTarget:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DomainError(f"labels outside [0, {num_classes})")
    return SoftTarget(np.eye(num_classes)[labels])


def _target_array(target: Union[SoftTarget, np.ndarray, Tensor]) -> np.ndarray:
    if isinstance(target, SoftTarget):
        return target.probs
    return SoftTarget(getattr(target, "values", target)).probs


def cross_entropy_soft(pred_probs: Tensor, target: Union[SoftTarget, np.ndarray]) -> Tensor:
    """Batch mean of ``-sum_i t_i log(p_i + 1e-12)``."""
    t = _target_array(target)
    if tuple(pred_probs.shape) != t.shape:
        raise ShapeError("cross_entropy_soft", [pred_probs.shape, t.shape])
    log_p = ad.log(pred_probs, floor=LOG_FLOOR)
    return ad.scale(ad.sum(ad.mul(log_p, Tensor(t))), -1.0 / t.shape[0])


def kl_divergence(student_probs: Tensor, teacher_probs: Union[SoftTarget, np.ndarray]) -> Tensor:
    """Batch mean of ``sum_i q_i log((q_i + 1e-12) / (p_i + 1e-12))``, q = teacher, p = student."""
    q = _target_array(teacher_probs)
    if tuple(student_probs.shape) != q.shape:
        raise ShapeError("kl_divergence", [student_probs.shape, q.shape])
    log_ratio = ad.add(Tensor(np.log(q + LOG_FLOOR)), ad.negate(ad.log(student_probs, floor=LOG_FLOOR)))
    return ad.scale(ad.sum(ad.mul(log_ratio, Tensor(q))), 1.0 / q.shape[0])


def mix_labels(
    teacher_probs: Union[SoftTarget, np.ndarray], y_onehot: Union[SoftTarget, np.ndarray], alpha: float
) -> SoftTarget:
    """``alpha * f_T + (1 - alpha) * y``."""
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"alpha {alpha} is outside [0, 1]")
    t, y = _target_array(teacher_probs), _target_array(y_onehot)
    if t.shape != y.shape:
        raise ShapeError("mix_labels", [t.shape, y.shape])
    return SoftTarget(alpha * t + (1.0 - alpha) * y)


def _combine(weight_a: float, a: Tensor, weight_b: float, b: Tensor) -> Tensor:
    return ad.add(ad.scale(a, weight_a), ad.scale(b, weight_b))


def _teacher_probs(teacher: ProbabilityModel, x: np.ndarray) -> np.ndarray:
    # Constant input: the teacher records no lineage and receives no gradient.
    return teacher.probs(Tensor(x)).values


def ckd_loss(
    student: ProbabilityModel, teacher: ProbabilityModel, x: np.ndarray, y: np.ndarray, lam: float
) -> Tensor:
    """``(1 - lam) CE(f_S(x), y) + lam KL(f_S(x), f_T(x))``."""
    p_s = student.probs(Tensor(x))
    ce = cross_entropy_soft(p_s, one_hot(y, student.num_classes))
    kl = kl_divergence(p_s, _teacher_probs(teacher, x))
    return _combine(1.0 - lam, ce, lam, kl)


def ard_loss(
    student: ProbabilityModel, teacher: ProbabilityModel, x: np.ndarray, x_adv: np.ndarray,
    y: np.ndarray, lam: float,
) -> Tensor:
    """``(1 - lam) CE(f_S(x), y) + lam KL(f_S(x'), f_T(x))``."""
    ce = cross_entropy_soft(student.probs(Tensor(x)), one_hot(y, student.num_classes))
    kl = kl_divergence(student.probs(Tensor(x_adv)), _teacher_probs(teacher, x))
    return _combine(1.0 - lam, ce, lam, kl)


def rslad_loss(
    student: ProbabilityModel, teacher: ProbabilityModel, x: np.ndarray, x_adv: np.ndarray,
    lam: float, alpha: float = 1.0, y: Optional[np.ndarray] = None, label_mixing: bool = False,
) -> Tensor:
    """
    ``(1 - lam) KL(f_S(x), t) + lam KL(f_S(x'), t)`` with ``t = f_T(x)``, or with
    ``t = alpha f_T(x) + (1 - alpha) y`` when ``label_mixing`` is set.
    """
    target = SoftTarget(_teacher_probs(teacher, x))
    if label_mixing:
        if y is None:
            raise DomainError("label-mixed RSLAD requires labels")
        target = mix_labels(target, one_hot(y, student.num_classes), alpha)
    natural = kl_divergence(student.probs(Tensor(x)), target)
    adversarial = kl_divergence(student.probs(Tensor(x_adv)), target)
    return _combine(1.0 - lam, natural, lam, adversarial)


def akd_loss(
    student: ProbabilityModel, teacher: ProbabilityModel, x_adv: np.ndarray, y: np.ndarray, alpha: float
) -> Tensor:
    """``CE(f_S(x'), alpha f_T(x') + (1 - alpha) y)``; ``teacher`` may be a bound ensemble."""
    target = mix_labels(_teacher_probs(teacher, x_adv), one_hot(y, student.num_classes), alpha)
    return cross_entropy_soft(student.probs(Tensor(x_adv)), target)


def distillation_loss(
    variant: LossVariant,
    student: ProbabilityModel,
    teacher: Optional[ProbabilityModel],
    x: np.ndarray,
    y: np.ndarray,
    x_adv: Optional[np.ndarray] = None,
) -> Tensor:
    """
    Evaluate ``variant`` on one batch. Without adversarial inputs ``x_adv``
    falls back to ``x``; ``CE`` then reduces to standard training.
    """
    x_adv = x if x_adv is None else x_adv
    tag = variant.tag
    if tag is LossTag.CE:
        return cross_entropy_soft(student.probs(Tensor(x_adv)), one_hot(y, student.num_classes))
    if teacher is None:
        raise ConfigError("loss.tag", f"{tag.value} requires a teacher")
    if tag is LossTag.ENSEMBLE_AKD and not isinstance(teacher, BoundEnsemble):
        raise ConfigError("loss.tag", "ENSEMBLE_AKD requires an ensemble teacher")
    if tag is LossTag.CKD:
        return ckd_loss(student, teacher, x, y, variant.lam)
    if tag is LossTag.ARD:
        return ard_loss(student, teacher, x, x_adv, y, variant.lam)
    if tag in (LossTag.RSLAD, LossTag.RSLAD_LM):
        return rslad_loss(
            student, teacher, x, x_adv, variant.lam, variant.alpha, y, label_mixing=tag is LossTag.RSLAD_LM
        )
    return akd_loss(student, teacher, x_adv, y, variant.alpha)
