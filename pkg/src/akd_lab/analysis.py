"""
Training-dynamics analysis: per-sample difficulty, output entropy,
correct-class probability trajectories and their comparison between a
teacher and a student.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .attacks import AttackConfig, generate
from .autodiff import LOG_FLOOR, Tensor
from .data import Dataset, derive_seed
from .errors import DomainError, ShapeError
from .models import Model, ModelSpec, Params, ProbabilityModel

logger = logging.getLogger(__name__)

MODEL_TAGS = ("teacher", "student")
INPUT_KINDS = ("natural", "adversarial")
PREDICT_CHUNK = 1024

Snapshot = Union[Model, ProbabilityModel]
TrajectoryLike = Union["Trajectory", Sequence[float], np.ndarray]


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Correct-class probability of one sample at the end of each of K epochs."""

    sample_id: int
    probs: np.ndarray
    model_tag: str = "student"
    input_kind: str = "natural"

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64).reshape(-1)
        if probs.size == 0:
            raise DomainError(f"trajectory {self.sample_id} is empty")
        if np.any(probs < 0.0) or np.any(probs > 1.0):
            raise DomainError(f"trajectory {self.sample_id} has entries outside [0, 1]")
        if self.model_tag not in MODEL_TAGS:
            raise DomainError(f"unknown model tag '{self.model_tag}'")
        if self.input_kind not in INPUT_KINDS:
            raise DomainError(f"unknown input kind '{self.input_kind}'")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    def __len__(self) -> int:
        return int(self.probs.size)

    @property
    def final(self) -> float:
        return float(self.probs[-1])


@dataclass(frozen=True)
class DifficultyRanking:
    """Samples ordered easiest first: ascending score, ties by ascending id."""

    entries: Tuple[Tuple[int, float], ...]

    def __post_init__(self):
        entries = tuple((int(i), float(s)) for i, s in self.entries)
        if any(s < 0 for _, s in entries):
            raise DomainError("difficulty scores must be nonnegative")
        object.__setattr__(self, "entries", tuple(sorted(entries, key=lambda e: (e[1], e[0]))))

    @classmethod
    def from_scores(cls, scores: Sequence[float], sample_ids: Optional[Sequence[int]] = None) -> "DifficultyRanking":
        ids = range(len(scores)) if sample_ids is None else sample_ids
        if len(ids) != len(scores):
            raise ShapeError("difficulty_ranking", [(len(ids),), (len(scores),)])
        return cls(tuple(zip(ids, scores)))

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def sample_ids(self) -> List[int]:
        return [i for i, _ in self.entries]


def _bind(snapshot: Snapshot) -> ProbabilityModel:
    return snapshot.bind() if isinstance(snapshot, Model) else snapshot


def predicted_probs(model: ProbabilityModel, inputs: np.ndarray) -> np.ndarray:
    """Output distributions for ``inputs``, computed chunk by chunk."""
    inputs = np.asarray(inputs, dtype=np.float64)
    chunks = [
        model.probs(Tensor(inputs[start : start + PREDICT_CHUNK])).values
        for start in range(0, len(inputs), PREDICT_CHUNK)
    ]
    return np.concatenate(chunks) if chunks else np.zeros((0, model.num_classes))


def correct_class_probs(model: ProbabilityModel, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    return predicted_probs(model, x)[np.arange(len(y)), y]


def _check_snapshots(snapshots: Sequence[Snapshot]) -> List[ProbabilityModel]:
    if not snapshots:
        raise DomainError("no snapshots given")
    specs = {s.spec for s in snapshots if isinstance(s, Model)}
    if len(specs) > 1:
        raise ShapeError("snapshots", [s.input_shape for s in specs], "snapshots disagree on the model spec")
    return [_bind(s) for s in snapshots]


def difficulty_scores(snapshots: Sequence[Snapshot], x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-sample mean over snapshots of ``-log(f_k(x)_y + 1e-12)``."""
    models = _check_snapshots(snapshots)
    total = np.zeros(len(np.asarray(y)))
    for model in models:
        # p = 1 gives -log(1 + 1e-12) < 0; difficulty is clipped at zero.
        total += np.maximum(-np.log(correct_class_probs(model, x, y) + LOG_FLOOR), 0.0)
    return total / len(models)


def difficulty_score(snapshots: Sequence[Snapshot], x: np.ndarray, y: int) -> float:
    """Difficulty of a single sample ``x`` (no batch axis) with label ``y``."""
    return float(difficulty_scores(snapshots, np.asarray(x)[None], np.array([y]))[0])


def sample_entropy(probs: np.ndarray) -> np.ndarray:
    """Shannon entropy (nats) of each row; ``0 log 0 = 0``."""
    probs = np.asarray(probs, dtype=np.float64)
    safe = np.where(probs > 0, probs, 1.0)
    return -np.sum(probs * np.log(safe), axis=1)


def mean_entropy_of(model: ProbabilityModel, dataset: Dataset) -> float:
    if len(dataset) == 0:
        raise DomainError(f"cannot compute entropy of empty dataset '{dataset.name}'")
    return float(np.mean(sample_entropy(predicted_probs(model, dataset.inputs))))


def mean_entropy(params: Params, spec: ModelSpec, dataset: Dataset) -> float:
    return mean_entropy_of(Model(spec, params).bind(), dataset)


def entropy_series(snapshots: Sequence[Snapshot], dataset: Dataset) -> List[float]:
    """Mean entropy at each snapshot; one value per epoch."""
    return [mean_entropy_of(model, dataset) for model in _check_snapshots(snapshots)]


def _snapshot_inputs(
    model: ProbabilityModel, x: np.ndarray, y: np.ndarray, attack: Optional[AttackConfig], epoch: int
) -> np.ndarray:
    if attack is None:
        return x
    # Regenerated against each snapshot.
    return generate(model, x, y, attack.with_seed(derive_seed(attack.seed, epoch)))


def record_trajectories(
    snapshots: Sequence[Snapshot],
    x: np.ndarray,
    y: np.ndarray,
    attack: Optional[AttackConfig] = None,
    *,
    sample_ids: Optional[Sequence[int]] = None,
    model_tag: str = "student",
) -> List[Trajectory]:
    """One trajectory per sample; adversarial when ``attack`` is given."""
    models = _check_snapshots(snapshots)
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.int64)
    ids = list(range(len(y))) if sample_ids is None else list(sample_ids)
    if len(ids) != len(y):
        raise ShapeError("record_trajectories", [(len(ids),), (len(y),)])
    matrix = np.empty((len(y), len(models)))
    for k, model in enumerate(models):
        x_k = _snapshot_inputs(model, x, y, attack, k)
        matrix[:, k] = correct_class_probs(model, x_k, y)
    kind = "adversarial" if attack is not None else "natural"
    logger.debug(f"recorded {len(ids)} {kind} {model_tag} trajectories over {len(models)} snapshots")
    return [Trajectory(i, row, model_tag, kind) for i, row in zip(ids, matrix)]


def record_trajectory(
    snapshots: Sequence[Snapshot],
    x: np.ndarray,
    y: int,
    attack: Optional[AttackConfig] = None,
    *,
    sample_id: int = 0,
    model_tag: str = "student",
) -> Trajectory:
    """Trajectory of a single sample ``x`` (no batch axis)."""
    return record_trajectories(
        snapshots, np.asarray(x)[None], np.array([y]), attack, sample_ids=[sample_id], model_tag=model_tag
    )[0]


def trajectories_from_snapshots(
    snapshots: Sequence[np.ndarray], sample_ids: Optional[Sequence[int]] = None, model_tag: str = "student"
) -> List[Trajectory]:
    """Natural trajectories from per-epoch correct-class probability arrays recorded during training."""
    if not snapshots:
        raise DomainError("no recorded snapshots")
    matrix = np.stack([np.asarray(s, dtype=np.float64) for s in snapshots], axis=1)
    ids = range(matrix.shape[0]) if sample_ids is None else sample_ids
    return [Trajectory(i, row, model_tag, "natural") for i, row in zip(ids, matrix)]


def _vector(t: TrajectoryLike) -> np.ndarray:
    return t.probs if isinstance(t, Trajectory) else np.asarray(t, dtype=np.float64).reshape(-1)


def inner_product(a: TrajectoryLike, b: TrajectoryLike) -> float:
    va, vb = _vector(a), _vector(b)
    if va.shape != vb.shape:
        raise ShapeError("inner_product", [va.shape, vb.shape])
    return float(np.dot(va, vb))


def cosine_similarity(a: TrajectoryLike, b: TrajectoryLike) -> float:
    va, vb = _vector(a), _vector(b)
    if va.shape != vb.shape:
        raise ShapeError("cosine_similarity", [va.shape, vb.shape])
    norm_a, norm_b = math.sqrt(float(np.dot(va, va))), math.sqrt(float(np.dot(vb, vb)))
    if norm_a == 0.0 or norm_b == 0.0:
        raise DomainError("cosine similarity of a zero trajectory is undefined")
    return float(np.dot(va, vb)) / (norm_a * norm_b)


def _paired(
    student_trajs: Sequence[Trajectory], teacher_trajs: Sequence[Trajectory], ranking: DifficultyRanking
) -> Iterable[Tuple[int, Trajectory, Trajectory]]:
    students = {t.sample_id: t for t in student_trajs}
    teachers = {t.sample_id: t for t in teacher_trajs}
    ranked = set(ranking.sample_ids)
    if set(students) != ranked or set(teachers) != ranked:
        missing = sorted(ranked.symmetric_difference(students) | ranked.symmetric_difference(teachers))
        raise DomainError(f"trajectory sample ids do not match the ranking: {missing[:10]}")
    for rank, sample_id in enumerate(ranking.sample_ids):
        yield rank, students[sample_id], teachers[sample_id]


def improvement_curve(
    student_trajs: Sequence[Trajectory], teacher_trajs: Sequence[Trajectory], ranking: DifficultyRanking
) -> List[Tuple[int, float]]:
    """``(difficulty rank, p_S,K - p_T,K)`` in ranking order."""
    return [(rank, s.final - t.final) for rank, s, t in _paired(student_trajs, teacher_trajs, ranking)]


def cosine_series(
    student_trajs: Sequence[Trajectory], teacher_trajs: Sequence[Trajectory], ranking: DifficultyRanking
) -> List[Tuple[int, float, float]]:
    """``(difficulty rank, cosine similarity, inner product)`` in ranking order."""
    return [
        (rank, cosine_similarity(s, t), inner_product(s, t))
        for rank, s, t in _paired(student_trajs, teacher_trajs, ranking)
    ]


def moving_average(series: Sequence[float], window: int) -> List[float]:
    """Centered mean; windows are truncated at the edges so the length is preserved."""
    values = np.asarray(series, dtype=np.float64)
    if window < 1 or window % 2 == 0:
        raise DomainError(f"window must be a positive odd integer, got {window}")
    if window > len(values):
        raise DomainError(f"window {window} is larger than the series ({len(values)})")
    half = window // 2
    return [float(np.mean(values[max(0, i - half) : i + half + 1])) for i in range(len(values))]


def rank_extremes(ranking: DifficultyRanking, n: int) -> Tuple[List[int], List[int]]:
    """The ``n`` easiest and ``n`` hardest sample ids; ties broken by ascending id."""
    if not 0 <= n <= len(ranking):
        raise DomainError(f"cannot take {n} extremes from {len(ranking)} samples")
    easiest = [i for i, _ in ranking.entries[:n]]
    hardest = [i for i, _ in sorted(ranking.entries, key=lambda e: (-e[1], e[0]))[:n]]
    return easiest, hardest


def format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_tsv(path: Union[str, Path], header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    """Tab-separated table; the first line is the header row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["\t".join(header)]
    for row in rows:
        if len(row) != len(header):
            raise ShapeError("write_tsv", [(len(header),), (len(row),)], "row width does not match header")
        lines.append("\t".join(format_value(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
