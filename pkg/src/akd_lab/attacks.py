"""
L-infinity adversarial example generation: FGSM, Fast-FGSM and PGD-k.

Attacks operate on plain arrays. The model is any :class:`ProbabilityModel`
whose ``probs`` is differentiable w.r.t. its input (a frozen
:class:`~akd_lab.models.BoundModel` or an ensemble). Model parameters are
never touched: bound leaves of a frozen model do not require gradients.
"""

import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import LOG_FLOOR, Tensor
from .errors import ConfigError, DomainError, ShapeError
from .losses import cross_entropy_soft, one_hot
from .models import ProbabilityModel

logger = logging.getLogger(__name__)

# (per-sample loss, input gradient)
LossGradFn = Callable[[ProbabilityModel, np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]]


class AttackMethod(str, Enum):
    PGD = "pgd"
    FGSM = "fgsm"
    FFGSM = "ffgsm"


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    iterations: int = 7
    random_start: bool = True
    restarts: int = 1
    clamp_lo: float = 0.0
    clamp_hi: float = 1.0
    seed: int = 0
    method: AttackMethod = AttackMethod.PGD

    def __post_init__(self):
        try:
            object.__setattr__(self, "method", AttackMethod(self.method))
        except ValueError:
            raise ConfigError("attack.method", f"unknown attack '{self.method}'") from None
        if self.epsilon < 0:
            raise ConfigError("attack.epsilon", "must be nonnegative")
        if self.step_size <= 0:
            raise ConfigError("attack.step_size", "must be positive")
        if self.iterations < 1:
            raise ConfigError("attack.iterations", "must be at least 1")
        if self.restarts < 1:
            raise ConfigError("attack.restarts", "must be at least 1")
        if self.clamp_lo >= self.clamp_hi:
            raise ConfigError("attack.clamp_lo", "must be below clamp_hi")

    @classmethod
    def ffgsm(cls, epsilon: float, **kwargs) -> "AttackConfig":
        """Fast-FGSM defaults: full-ball random start, step 1.25 epsilon."""
        kwargs.setdefault("step_size", 1.25 * epsilon or 2 / 255)
        kwargs.setdefault("random_start", True)
        return cls(epsilon=epsilon, iterations=1, method=AttackMethod.FFGSM, **kwargs)

    @classmethod
    def strong_eval(cls, epsilon: float = 8 / 255, **kwargs) -> "AttackConfig":
        """PGD-20 with two random restarts; the evaluation surrogate for AutoAttack."""
        kwargs.setdefault("step_size", epsilon / 4 or 2 / 255)
        return cls(epsilon=epsilon, iterations=20, random_start=True, restarts=2, **kwargs)

    def with_seed(self, seed: int) -> "AttackConfig":
        return replace(self, seed=int(seed))

    @property
    def gradient_evaluations(self) -> int:
        if self.method is AttackMethod.PGD:
            return self.iterations * self.restarts
        return 1


def project_linf(
    x_adv: np.ndarray, x_orig: np.ndarray, epsilon: float, clamp_lo: float, clamp_hi: float
) -> np.ndarray:
    """Clip into the epsilon-ball around ``x_orig`` intersected with the valid input range."""
    x_adv, x_orig = np.asarray(x_adv, dtype=np.float64), np.asarray(x_orig, dtype=np.float64)
    if x_adv.shape != x_orig.shape:
        raise ShapeError("project_linf", [x_adv.shape, x_orig.shape])
    return np.clip(np.clip(x_adv, x_orig - epsilon, x_orig + epsilon), clamp_lo, clamp_hi)


def ce_loss_grad(model: ProbabilityModel, x: np.ndarray, target: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-sample cross-entropy at ``x`` and its gradient w.r.t. ``x``."""
    x_t = Tensor(x, requires_grad=True)
    probs = model.probs(x_t)
    loss = cross_entropy_soft(probs, one_hot(target, model.num_classes))
    ad.backward(loss)
    per_sample = -np.log(probs.values[np.arange(len(target)), target] + LOG_FLOOR)
    if x_t.grad is None:
        raise DomainError("attack: no gradient reached the input")
    return per_sample, x_t.grad


def _signed_step(
    model: ProbabilityModel, loss_grad_fn: LossGradFn, x_start: np.ndarray, x: np.ndarray,
    target: np.ndarray, step: float, cfg: AttackConfig,
) -> np.ndarray:
    _, grad = loss_grad_fn(model, x_start, target)
    return project_linf(x_start + step * np.sign(grad), x, cfg.epsilon, cfg.clamp_lo, cfg.clamp_hi)


def _random_start(x: np.ndarray, cfg: AttackConfig, rng: np.random.Generator) -> np.ndarray:
    noise = rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape)
    return project_linf(x + noise, x, cfg.epsilon, cfg.clamp_lo, cfg.clamp_hi)


def fgsm(
    model: ProbabilityModel, x: np.ndarray, target: np.ndarray, cfg: AttackConfig,
    loss_grad_fn: LossGradFn = ce_loss_grad,
) -> np.ndarray:
    """One signed-gradient step of size epsilon; ``cfg.iterations`` is ignored."""
    x = np.asarray(x, dtype=np.float64)
    if cfg.epsilon == 0:
        return x.copy()
    return _signed_step(model, loss_grad_fn, x, x, target, cfg.epsilon, cfg)


def ffgsm(
    model: ProbabilityModel, x: np.ndarray, target: np.ndarray, cfg: AttackConfig,
    loss_grad_fn: LossGradFn = ce_loss_grad,
) -> np.ndarray:
    """Uniform start in the ball (when enabled), then one step of ``cfg.step_size``."""
    x = np.asarray(x, dtype=np.float64)
    if cfg.epsilon == 0:
        return x.copy()
    start = _random_start(x, cfg, np.random.default_rng(cfg.seed)) if cfg.random_start else x
    return _signed_step(model, loss_grad_fn, start, x, target, cfg.step_size, cfg)


def pgd(
    model: ProbabilityModel, x: np.ndarray, target: np.ndarray, cfg: AttackConfig,
    loss_grad_fn: LossGradFn = ce_loss_grad,
) -> np.ndarray:
    """
    PGD-k: ``cfg.iterations`` signed-gradient ascent steps, projecting after each.

    With several restarts the per-sample restart with the highest final loss
    is returned.
    """
    x = np.asarray(x, dtype=np.float64)
    if cfg.epsilon == 0:
        return x.copy()

    best, best_loss = None, None
    for restart in range(cfg.restarts):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, restart]))
        x_adv = _random_start(x, cfg, rng) if cfg.random_start else x.copy()
        for _ in range(cfg.iterations):
            x_adv = _signed_step(model, loss_grad_fn, x_adv, x, target, cfg.step_size, cfg)
        if cfg.restarts == 1:
            return x_adv
        final_loss, _ = loss_grad_fn(model, x_adv, target)
        if best is None:
            best, best_loss = x_adv, final_loss
            continue
        better = final_loss > best_loss
        best = np.where(better.reshape((-1,) + (1,) * (x.ndim - 1)), x_adv, best)
        best_loss = np.where(better, final_loss, best_loss)
    logger.debug(f"pgd: {cfg.restarts} restarts x {cfg.iterations} iterations on {len(x)} samples")
    return best


_ATTACKS = {AttackMethod.PGD: pgd, AttackMethod.FGSM: fgsm, AttackMethod.FFGSM: ffgsm}


def generate(
    model: ProbabilityModel, x: np.ndarray, target: np.ndarray, cfg: Optional[AttackConfig],
    loss_grad_fn: LossGradFn = ce_loss_grad,
) -> np.ndarray:
    """Dispatch on ``cfg.method``; no config means the natural inputs."""
    if cfg is None:
        return np.asarray(x, dtype=np.float64).copy()
    return _ATTACKS[cfg.method](model, x, target, cfg, loss_grad_fn)
