"""
SGD training loops for standard, adversarial and distillation training,
learning-rate schedules, per-epoch checkpoints and early-stopping selection.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from . import autodiff as ad
from .analysis import correct_class_probs, mean_entropy_of
from .attacks import AttackConfig, generate
from .checkpoint import save_checkpoint
from .data import Dataset, batch_iter, derive_seed
from .errors import ArtifactError, ConfigError, DomainError, ShapeError
from .losses import LossVariant, distillation_loss
from .models import (
    BoundModel,
    EnsembleTeacher,
    Model,
    ModelSpec,
    Params,
    ProbabilityModel,
    Teacher,
    bind_teacher,
    init_params,
)

logger = logging.getLogger(__name__)

# Independent random streams derived from a run seed.
SHUFFLE_STREAM = 1
ATTACK_STREAM = 2
MONITOR_STREAM = 3

# Fixed evaluation chunk, independent of the training batch size.
EVAL_CHUNK = 1024


class ScheduleKind(str, Enum):
    EXPONENTIAL = "exponential"
    ONE_CYCLE = "one_cycle"
    CONSTANT = "constant"


@dataclass(frozen=True)
class Schedule:
    """
    ``exponential``: ``base_lr * decay**epoch``, constant within an epoch.
    ``one_cycle``: per-batch linear warmup from ``max_lr / div_factor`` to
    ``max_lr`` over the first ``pct_start`` of ``total_steps``, then linear
    decay to ``max_lr / final_div_factor``.
    """

    kind: ScheduleKind = ScheduleKind.CONSTANT
    base_lr: float = 0.1
    decay: float = 0.9
    max_lr: float = 0.21
    total_steps: int = 0
    pct_start: float = 0.5
    div_factor: float = 25.0
    final_div_factor: float = 2500.0

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", ScheduleKind(self.kind))
        except ValueError:
            raise ConfigError("schedule.kind", f"unknown schedule '{self.kind}'") from None
        if self.base_lr <= 0:
            raise ConfigError("schedule.base_lr", "must be positive")
        if not 0.0 < self.decay <= 1.0:
            raise ConfigError("schedule.decay", "must lie in (0, 1]")
        if self.max_lr <= 0:
            raise ConfigError("schedule.max_lr", "must be positive")
        if not 0.0 < self.pct_start < 1.0:
            raise ConfigError("schedule.pct_start", "must lie in (0, 1)")
        if self.total_steps < 0:
            raise ConfigError("schedule.total_steps", "must be nonnegative (0 derives it from the run)")


def lr_at(schedule: Schedule, epoch: int, step_in_epoch: int, steps_per_epoch: int) -> float:
    if epoch < 0 or steps_per_epoch < 1 or not 0 <= step_in_epoch < steps_per_epoch:
        raise DomainError(f"lr_at: step {step_in_epoch} of {steps_per_epoch} in epoch {epoch} is out of range")
    if schedule.kind is ScheduleKind.CONSTANT:
        return schedule.base_lr
    if schedule.kind is ScheduleKind.EXPONENTIAL:
        return schedule.base_lr * schedule.decay**epoch
    if schedule.kind is ScheduleKind.ONE_CYCLE:
        if schedule.total_steps < 1:
            raise ConfigError("schedule.total_steps", "one_cycle needs the total number of steps")
        t = epoch * steps_per_epoch + step_in_epoch
        peak = schedule.max_lr
        start, end = peak / schedule.div_factor, peak / schedule.final_div_factor
        warmup = schedule.total_steps * schedule.pct_start
        if t <= warmup:
            return peak - (peak - start) * (1.0 - t / warmup)
        return peak + (end - peak) * min(1.0, (t - warmup) / (schedule.total_steps - warmup))
    raise ConfigError("schedule.kind", f"unknown schedule '{schedule.kind}'")


def sgd_step(params: Params, grads: Dict[str, Optional[np.ndarray]], lr: float) -> Params:
    """``w <- w - lr * g`` for every parameter; returns a new parameter set."""
    updated = {}
    for name, weight in params.tensors.items():
        grad = grads.get(name)
        if grad is None:
            raise DomainError(f"sgd_step: missing gradient for '{name}'")
        updated[name] = weight - lr * grad
    return Params(updated, seed=params.seed)


class SGD:
    """SGD with optional heavy-ball momentum and L2 weight decay."""

    def __init__(self, momentum: float = 0.0, weight_decay: float = 0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, params: Params, grads: Dict[str, Optional[np.ndarray]], lr: float) -> Params:
        if self.momentum == 0.0 and self.weight_decay == 0.0:
            return sgd_step(params, grads, lr)
        effective = {}
        for name, weight in params.tensors.items():
            grad = grads.get(name)
            if grad is None:
                raise DomainError(f"sgd_step: missing gradient for '{name}'")
            grad = grad + self.weight_decay * weight
            if self.momentum:
                grad = self.momentum * self.velocity.get(name, 0.0) + grad
                self.velocity[name] = grad
            effective[name] = grad
        return sgd_step(params, effective, lr)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 128
    seed: int = 0
    schedule: Schedule = field(default_factory=Schedule)
    loss: LossVariant = field(default_factory=LossVariant)
    attack: Optional[AttackConfig] = None
    monitor_attack: Optional[AttackConfig] = None
    early_stop_epoch: Optional[int] = None
    checkpoint_every_epoch: bool = False
    momentum: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs", "must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be at least 1")
        if self.early_stop_epoch is not None and not 1 <= self.early_stop_epoch <= self.epochs:
            raise ConfigError("early_stop_epoch", f"must lie in [1, {self.epochs}]")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("momentum", "momentum and weight_decay must be nonnegative")
        if self.attack is not None and self.attack.restarts != 1:
            raise ConfigError("attack.restarts", f"training attacks run a single restart, got {self.attack.restarts}")

    @property
    def robustness_monitor(self) -> Optional[AttackConfig]:
        """Attack used for the per-epoch robust accuracy, one restart."""
        monitor = self.monitor_attack or self.attack
        return replace(monitor, restarts=1) if monitor is not None else None


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    clean_acc: float
    robust_acc: Optional[float]
    entropy: float
    attack_grad_evals: int = 0

    def to_record(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class RunLog:
    records: List[EpochRecord] = field(default_factory=list)
    # Correct-class probabilities on the recording set, one array per epoch.
    snapshots: List[np.ndarray] = field(default_factory=list)

    def append(self, record: EpochRecord) -> None:
        expected = self.records[-1].epoch + 1 if self.records else 1
        if record.epoch != expected:
            raise DomainError(f"run log expected epoch {expected}, got {record.epoch}")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[EpochRecord]:
        return iter(self.records)

    def losses(self) -> List[float]:
        return [r.loss for r in self.records]

    def to_jsonl(self, path: Union[str, Path], extra: Optional[Dict[str, Any]] = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for record in self.records:
                f.write(json.dumps({**record.to_record(), **(extra or {})}, sort_keys=True) + "\n")
        return path

    @classmethod
    def from_jsonl(cls, path: Union[str, Path]) -> "RunLog":
        path = Path(path)
        log = cls()
        try:
            lines = path.read_text(encoding="utf-8").splitlines()
        except FileNotFoundError:
            raise ArtifactError(path, "run log not found") from None
        fields = set(EpochRecord.__dataclass_fields__)
        for line in lines:
            if line.strip():
                data = json.loads(line)
                log.append(EpochRecord(**{k: v for k, v in data.items() if k in fields}))
        return log


@dataclass
class TrainResult:
    params: Params
    run_log: RunLog
    checkpoints: Dict[int, Path]
    designated: Params
    designated_epoch: int


def select_early_stop_epoch(run_log: RunLog, metric: str = "robust_acc") -> int:
    """Epoch maximizing ``metric`` (earliest on ties)."""
    if metric not in ("robust_acc", "clean_acc"):
        raise ConfigError("early_stop_epoch", f"cannot select on '{metric}'")
    scored = [(getattr(r, metric), r.epoch) for r in run_log]
    if not scored or any(value is None for value, _ in scored):
        raise ConfigError("early_stop_epoch", f"run log has no '{metric}' values to select from")
    best = max(value for value, _ in scored)
    return min(epoch for value, epoch in scored if value == best)


def teacher_fingerprint(teacher: Teacher) -> str:
    if isinstance(teacher, EnsembleTeacher):
        return ":".join(params.checksum() for params, _ in teacher.members)
    return teacher.params.checksum()


def _check_dataset(spec: ModelSpec, dataset: Dataset) -> None:
    if dataset.input_shape != spec.input_shape or dataset.num_classes != spec.num_classes:
        raise ShapeError(
            "train",
            [dataset.input_shape, spec.input_shape],
            f"dataset '{dataset.name}' ({dataset.num_classes} classes) does not match the model spec",
        )


def train(
    spec: ModelSpec,
    dataset: Dataset,
    cfg: TrainConfig,
    teacher: Optional[Teacher] = None,
    *,
    eval_set: Optional[Dataset] = None,
    record_set: Optional[Dataset] = None,
    checkpoint_dir: Optional[Union[str, Path]] = None,
    checkpoint_prefix: str = "model",
    checkpoint_metadata: Optional[Dict[str, Any]] = None,
) -> TrainResult:
    """
    Train a freshly initialized model. Adversarial examples are regenerated
    each batch against the current student parameters; the teacher stays frozen.
    """
    _check_dataset(spec, dataset)
    if eval_set is not None:
        _check_dataset(spec, eval_set)
    if cfg.loss.requires_teacher and teacher is None:
        raise ConfigError("loss.tag", f"{cfg.loss.tag.value} requires a teacher")
    if cfg.loss.requires_ensemble and not isinstance(teacher, EnsembleTeacher):
        raise ConfigError("loss.tag", "ENSEMBLE_AKD requires an ensemble teacher")

    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    schedule = cfg.schedule
    if schedule.kind is ScheduleKind.ONE_CYCLE and schedule.total_steps == 0:
        schedule = replace(schedule, total_steps=cfg.epochs * steps_per_epoch)

    params = init_params(spec, cfg.seed)
    frozen_teacher = bind_teacher(teacher) if teacher is not None else None
    teacher_checksum = teacher_fingerprint(teacher) if teacher is not None else None
    optimizer = SGD(cfg.momentum, cfg.weight_decay)
    monitor = cfg.robustness_monitor
    shuffle_seed = derive_seed(cfg.seed, SHUFFLE_STREAM)
    log = RunLog()
    checkpoints: Dict[int, Path] = {}
    designated, designated_epoch = None, cfg.epochs

    for epoch in range(cfg.epochs):
        batch_losses: List[float] = []
        grad_evals = 0
        lr = schedule.base_lr
        for step, batch in enumerate(batch_iter(dataset, cfg.batch_size, shuffle_seed, epoch)):
            lr = lr_at(schedule, epoch, step, steps_per_epoch)
            x_adv = None
            if cfg.attack is not None:
                attack = cfg.attack.with_seed(derive_seed(cfg.seed, ATTACK_STREAM, epoch, step))
                x_adv = generate(BoundModel(spec, params), batch.inputs, batch.labels, attack)
                grad_evals += attack.gradient_evaluations
            student = BoundModel(spec, params, requires_grad=True)
            loss = distillation_loss(cfg.loss, student, frozen_teacher, batch.inputs, batch.labels, x_adv)
            ad.backward(loss)
            params = optimizer.step(params, student.gradients(), lr)
            batch_losses.append(loss.item())

        k = epoch + 1
        model = Model(spec, params)
        held_out = eval_set if eval_set is not None else dataset
        monitor_k = monitor.with_seed(derive_seed(cfg.seed, MONITOR_STREAM, k)) if monitor else None
        clean_acc, robust_acc = evaluate_model(model.bind(), held_out, monitor_k)
        record = EpochRecord(
            epoch=k,
            lr=lr,
            loss=float(np.mean(batch_losses)),
            clean_acc=clean_acc,
            robust_acc=robust_acc,
            entropy=mean_entropy_of(model.bind(), dataset),
            attack_grad_evals=grad_evals,
        )
        log.append(record)
        robust_text = f"{robust_acc:.4f}" if robust_acc is not None else "-"
        logger.info(
            f"epoch {k}/{cfg.epochs} lr={lr:.5f} loss={record.loss:.5f} "
            f"clean={clean_acc:.4f} robust={robust_text} entropy={record.entropy:.4f}"
        )
        if record_set is not None:
            log.snapshots.append(correct_class_probs(model.bind(), record_set.inputs, record_set.labels))

        if checkpoint_dir is not None and (cfg.checkpoint_every_epoch or k in (cfg.epochs, cfg.early_stop_epoch)):
            path = Path(checkpoint_dir) / f"{checkpoint_prefix}_ep{k}.ckpt"
            checkpoints[k] = save_checkpoint(params, path, spec=spec, epoch=k, metadata=checkpoint_metadata)
        if cfg.early_stop_epoch == k:
            designated, designated_epoch = params, k

    if teacher is not None and teacher_fingerprint(teacher) != teacher_checksum:
        raise DomainError("teacher parameters changed during distillation")
    return TrainResult(params, log, checkpoints, designated or params, designated_epoch)


def evaluate_model(
    model: ProbabilityModel, dataset: Dataset, attack: Optional[AttackConfig] = None
) -> Tuple[float, Optional[float]]:
    """
    Clean accuracy and, with an attack, robust accuracy on the attack outputs.
    A sample counts as robust only when every restart leaves it correctly classified.
    """
    n = len(dataset)
    if n == 0:
        raise DomainError(f"cannot evaluate on empty dataset '{dataset.name}'")
    clean_correct = np.zeros(n, dtype=bool)
    robust_correct = np.zeros(n, dtype=bool)
    for start in range(0, n, EVAL_CHUNK):
        x = dataset.inputs[start : start + EVAL_CHUNK]
        y = dataset.labels[start : start + EVAL_CHUNK]
        clean = _predict(model, x) == y
        clean_correct[start : start + len(y)] = clean
        if attack is None:
            continue
        robust = np.ones(len(y), dtype=bool)
        for restart in range(attack.restarts):
            single = replace(attack, restarts=1, seed=derive_seed(attack.seed, restart, start))
            robust &= _predict(model, generate(model, x, y, single)) == y
        robust_correct[start : start + len(y)] = robust
    clean_acc = float(clean_correct.mean())
    return clean_acc, (float(robust_correct.mean()) if attack is not None else None)


def evaluate(
    params: Params, spec: ModelSpec, dataset: Dataset, attack: Optional[AttackConfig] = None
) -> Tuple[float, Optional[float]]:
    _check_dataset(spec, dataset)
    return evaluate_model(BoundModel(spec, params), dataset, attack)


def _predict(model: ProbabilityModel, x: np.ndarray) -> np.ndarray:
    return np.argmax(model.probs(ad.Tensor(x)).values, axis=1)

