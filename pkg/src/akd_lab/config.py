"""
Experiment configuration: a TOML document parsed into frozen dataclasses and
validated in full before any command touches the filesystem.

Example::

    name = "moons-akd"
    output_dir = "runs/moons"

    [dataset]
    generator = "two_moons"
    n_train = 2000
    n_test = 1000
    noise = 0.1

    [model]
    kind = "mlp"
    layer_widths = [32, 32, 2]

    [teacher]
    count = 1
    epochs = 50
    early_stop_epoch = "best_robust"
    [teacher.schedule]
    kind = "exponential"
    [teacher.attack]
    epsilon = 0.1
    step_size = 0.025

    [student]
    epochs = 50
    batch_size = 256
    [student.loss]
    tag = "AKD"
    alpha = 0.75
    [student.schedule]
    kind = "one_cycle"
    [student.attack]
    epsilon = 0.1
    step_size = 0.025

    [[eval.attacks]]
    name = "pgd20"
    epsilon = 0.1
    step_size = 0.025
    iterations = 20
    restarts = 2

Ensemble members share the ``[teacher]`` settings and may override them in
``[[teacher.members]]`` tables, one per member. Mixing a standardly trained
teacher with an adversarially trained one::

    [teacher]
    count = 2
    beta = [0.3, 0.7]
    [teacher.attack]
    epsilon = 0.1
    step_size = 0.025

    [[teacher.members]]
    standard = true

    [[teacher.members]]
    early_stop_epoch = "best_robust"
"""

import hashlib
import json
import math
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .attacks import AttackConfig, AttackMethod
from .data import Dataset, gen_gaussian_blobs, gen_two_moons, load_idx_images
from .errors import ConfigError, DomainError
from .losses import LossTag, LossVariant
from .models import ModelKind, ModelSpec
from .training import Schedule, ScheduleKind, TrainConfig

GENERATORS = ("two_moons", "gaussian_blobs", "idx")
EARLY_STOP_METRICS = {"best_robust": "robust_acc", "best_clean": "clean_acc"}

_ATTACK_KEYS = {
    "method", "epsilon", "step_size", "iterations", "random_start", "restarts", "clamp_lo", "clamp_hi", "seed",
}
_SCHEDULE_KEYS = {
    "kind", "base_lr", "decay", "max_lr", "total_steps", "pct_start", "div_factor", "final_div_factor",
}
_MEMBER_KEYS = {"seed", "standard", "attack", "monitor_attack", "early_stop_epoch"}


def _section(doc: Mapping[str, Any], key: str, prefix: str = "", required: bool = False) -> Dict[str, Any]:
    value = doc.get(key)
    path = f"{prefix}{key}"
    if value is None:
        if required:
            raise ConfigError(path, "section is required")
        return {}
    if not isinstance(value, Mapping):
        raise ConfigError(path, "must be a table")
    return dict(value)


def _reject_unknown(table: Mapping[str, Any], allowed: set, prefix: str) -> None:
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise ConfigError(f"{prefix}.{unknown[0]}", "unknown key")


def _typed(table: Mapping[str, Any], key: str, kind, default, prefix: str):
    value = table.get(key, default)
    if value is None:
        return None
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if kind is int and isinstance(value, bool) or not isinstance(value, kind):
        raise ConfigError(f"{prefix}.{key}", f"expected {kind.__name__}, got {value!r}")
    return value


def _wrap(prefix: str, build):
    """Re-raise validation failures from library constructors under the config path."""
    try:
        return build()
    except ConfigError as e:
        raise ConfigError(f"{prefix}.{e.field.split('.')[-1]}", str(e).split(": ", 1)[-1]) from e
    except (DomainError, ValueError, TypeError) as e:
        raise ConfigError(prefix, str(e)) from e


def parse_attack(table: Mapping[str, Any], prefix: str) -> AttackConfig:
    _reject_unknown(table, _ATTACK_KEYS | {"name"}, prefix)
    method = table.get("method", AttackMethod.PGD.value)
    if method not in {m.value for m in AttackMethod}:
        raise ConfigError(f"{prefix}.method", f"unknown attack '{method}'")
    epsilon = _typed(table, "epsilon", float, 8 / 255, prefix)
    kwargs = {k: table[k] for k in _ATTACK_KEYS - {"method", "epsilon"} if k in table}
    if method == AttackMethod.FFGSM.value:
        kwargs.pop("iterations", None)
        return _wrap(prefix, lambda: AttackConfig.ffgsm(epsilon, **kwargs))
    return _wrap(prefix, lambda: AttackConfig(epsilon=epsilon, method=method, **kwargs))


def parse_schedule(table: Mapping[str, Any], prefix: str, default_kind: str) -> Schedule:
    _reject_unknown(table, _SCHEDULE_KEYS, prefix)
    kind = table.get("kind", default_kind)
    if kind not in {k.value for k in ScheduleKind}:
        raise ConfigError(f"{prefix}.kind", f"unknown schedule '{kind}'")
    return _wrap(prefix, lambda: Schedule(**{**table, "kind": kind}))


@dataclass(frozen=True)
class DatasetConfig:
    generator: str = "two_moons"
    n_train: int = 2000
    n_test: int = 1000
    seed: int = 0
    noise: float = 0.1
    d: int = 2
    c: int = 2
    separation: float = 3.0
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    classes: Tuple[int, ...] = ()

    @property
    def input_shape(self) -> Optional[Tuple[int, ...]]:
        if self.generator == "two_moons":
            return (2,)
        if self.generator == "gaussian_blobs":
            return (self.d,)
        return None

    @property
    def num_classes(self) -> Optional[int]:
        if self.generator == "two_moons":
            return 2
        if self.generator == "gaussian_blobs":
            return self.c
        return len(self.classes) or None

    def load(self, split: str, base_dir: Path = Path(".")) -> Dataset:
        """Build or read the ``train``/``test`` split; test splits use a distinct seed."""
        seed = self.seed if split == "train" else self.seed + 1
        n = self.n_train if split == "train" else self.n_test
        if self.generator == "two_moons":
            return gen_two_moons(n, self.noise, seed, split)
        if self.generator == "gaussian_blobs":
            return gen_gaussian_blobs(n, self.d, self.c, self.separation, seed, split)
        images = self.train_images if split == "train" else self.test_images
        labels = self.train_labels if split == "train" else self.test_labels
        return load_idx_images(base_dir / images, base_dir / labels, self.classes or None, split)


@dataclass(frozen=True)
class TeacherMember:
    """One ensemble member: its seed, its training run and how its epoch is chosen."""

    seed: int
    train: TrainConfig
    # "best_robust" / "best_clean" pick the epoch after training; ints are fixed up front.
    early_stop: Optional[Union[int, str]] = None

    @property
    def early_stop_metric(self) -> Optional[str]:
        return EARLY_STOP_METRICS.get(self.early_stop) if isinstance(self.early_stop, str) else None


@dataclass(frozen=True)
class TeacherConfig:
    count: int
    seeds: Tuple[int, ...]
    beta: Tuple[float, ...]
    # Shared settings; members may override attack, monitor_attack, seed and early stopping.
    train: TrainConfig
    early_stop: Optional[Union[int, str]] = None
    members: Tuple[TeacherMember, ...] = ()

    @property
    def early_stop_metric(self) -> Optional[str]:
        return EARLY_STOP_METRICS.get(self.early_stop) if isinstance(self.early_stop, str) else None


@dataclass(frozen=True)
class StudentConfig:
    train: TrainConfig
    record_trajectories: bool = False


@dataclass(frozen=True)
class EvalConfig:
    attacks: Tuple[Tuple[str, AttackConfig], ...] = ()


@dataclass(frozen=True)
class AnalysisConfig:
    enabled: bool = True
    split: str = "test"
    smoothing_window: int = 51
    extremes: int = 32
    teacher_member: int = 0
    attack: Optional[AttackConfig] = None


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    output_dir: Path
    dataset: DatasetConfig
    model: ModelSpec
    teacher: TeacherConfig
    student: StudentConfig
    eval: EvalConfig
    analysis: AnalysisConfig
    config_hash: str
    base_dir: Path = field(default=Path("."))

    def load_dataset(self, split: str) -> Dataset:
        return self.dataset.load(split, self.base_dir)


def config_hash(document: Mapping[str, Any]) -> str:
    """SHA-256 of the canonical JSON of the parsed document, ``output_dir`` excluded."""
    canonical = {k: v for k, v in document.items() if k != "output_dir"}
    payload = json.dumps(canonical, sort_keys=True, separators=(",", ":"), ensure_ascii=False, default=str)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _parse_dataset(doc: Mapping[str, Any]) -> DatasetConfig:
    table = _section(doc, "dataset", required=True)
    _reject_unknown(table, set(DatasetConfig.__dataclass_fields__), "dataset")
    generator = table.get("generator", "two_moons")
    if generator not in GENERATORS:
        raise ConfigError("dataset.generator", f"unknown generator '{generator}'")
    cfg = DatasetConfig(
        generator=generator,
        n_train=_typed(table, "n_train", int, 2000, "dataset"),
        n_test=_typed(table, "n_test", int, 1000, "dataset"),
        seed=_typed(table, "seed", int, 0, "dataset"),
        noise=_typed(table, "noise", float, 0.1, "dataset"),
        d=_typed(table, "d", int, 2, "dataset"),
        c=_typed(table, "c", int, 2, "dataset"),
        separation=_typed(table, "separation", float, 3.0, "dataset"),
        train_images=_typed(table, "train_images", str, "", "dataset"),
        train_labels=_typed(table, "train_labels", str, "", "dataset"),
        test_images=_typed(table, "test_images", str, "", "dataset"),
        test_labels=_typed(table, "test_labels", str, "", "dataset"),
        classes=tuple(table.get("classes", ())),
    )
    if generator != "idx":
        if cfg.n_train < max(2, cfg.c) or cfg.n_test < max(2, cfg.c):
            raise ConfigError("dataset.n_train", "too few samples for the number of classes")
        if cfg.noise < 0:
            raise ConfigError("dataset.noise", "must be nonnegative")
        if cfg.separation <= 0:
            raise ConfigError("dataset.separation", "must be positive")
    else:
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if not getattr(cfg, key):
                raise ConfigError(f"dataset.{key}", "required for the idx loader")
    return cfg


def _parse_model(doc: Mapping[str, Any], dataset: DatasetConfig) -> ModelSpec:
    table = _section(doc, "model", required=True)
    _reject_unknown(table, {"kind", "layer_widths", "input_shape", "num_classes"}, "model")
    kind = table.get("kind", ModelKind.MLP.value)
    if kind not in {k.value for k in ModelKind}:
        raise ConfigError("model.kind", f"unknown model kind '{kind}'")
    input_shape = table.get("input_shape", dataset.input_shape)
    num_classes = table.get("num_classes", dataset.num_classes)
    if input_shape is None:
        raise ConfigError("model.input_shape", "required when the dataset shape is not known up front")
    if num_classes is None:
        raise ConfigError("model.num_classes", "required when the dataset classes are not known up front")
    if "layer_widths" not in table:
        raise ConfigError("model.layer_widths", "is required")
    return _wrap("model", lambda: ModelSpec(kind, tuple(input_shape), tuple(table["layer_widths"]), int(num_classes)))


def _parse_train(
    table: Mapping[str, Any], prefix: str, *, batch_size: int, default_schedule: str, loss: LossVariant,
    early_stop_epoch: Optional[int], checkpoint_every_epoch: bool,
) -> TrainConfig:
    attack = parse_attack(_section(table, "attack", f"{prefix}."), f"{prefix}.attack") if "attack" in table else None
    if attack is not None and attack.restarts != 1:
        raise ConfigError(f"{prefix}.attack.restarts", "training attacks run a single restart")
    monitor = (
        parse_attack(_section(table, "monitor_attack", f"{prefix}."), f"{prefix}.monitor_attack")
        if "monitor_attack" in table
        else None
    )
    schedule = parse_schedule(_section(table, "schedule", f"{prefix}."), f"{prefix}.schedule", default_schedule)
    return _wrap(
        prefix,
        lambda: TrainConfig(
            epochs=_typed(table, "epochs", int, 50, prefix),
            batch_size=_typed(table, "batch_size", int, batch_size, prefix),
            seed=_typed(table, "seed", int, 0, prefix),
            schedule=schedule,
            loss=loss,
            attack=attack,
            monitor_attack=monitor,
            early_stop_epoch=early_stop_epoch,
            checkpoint_every_epoch=checkpoint_every_epoch,
            momentum=_typed(table, "momentum", float, 0.0, prefix),
            weight_decay=_typed(table, "weight_decay", float, 0.0, prefix),
        ),
    )


_TRAIN_KEYS = {"epochs", "batch_size", "seed", "schedule", "attack", "monitor_attack", "momentum", "weight_decay"}


def _parse_analysis(doc: Mapping[str, Any]) -> AnalysisConfig:
    table = _section(doc, "analysis")
    _reject_unknown(
        table, {"enabled", "split", "smoothing_window", "extremes", "teacher_member", "attack"}, "analysis"
    )
    cfg = AnalysisConfig(
        enabled=_typed(table, "enabled", bool, True, "analysis"),
        split=_typed(table, "split", str, "test", "analysis"),
        smoothing_window=_typed(table, "smoothing_window", int, 51, "analysis"),
        extremes=_typed(table, "extremes", int, 32, "analysis"),
        teacher_member=_typed(table, "teacher_member", int, 0, "analysis"),
        attack=parse_attack(_section(table, "attack", "analysis."), "analysis.attack") if "attack" in table else None,
    )
    if cfg.split not in ("train", "test"):
        raise ConfigError("analysis.split", f"unknown split '{cfg.split}'")
    if cfg.smoothing_window < 1 or cfg.smoothing_window % 2 == 0:
        raise ConfigError("analysis.smoothing_window", "must be a positive odd integer")
    if cfg.extremes < 0:
        raise ConfigError("analysis.extremes", "must be nonnegative")
    return cfg


def _parse_early_stop(table: Mapping[str, Any], prefix: str) -> Tuple[Optional[Union[int, str]], Optional[int]]:
    """Raw ``early_stop_epoch`` value and, for integers, the fixed epoch."""
    early_stop = table.get("early_stop_epoch")
    if isinstance(early_stop, str):
        if early_stop not in EARLY_STOP_METRICS:
            raise ConfigError(f"{prefix}.early_stop_epoch", f"expected an epoch or one of {sorted(EARLY_STOP_METRICS)}")
        return early_stop, None
    if early_stop is not None:
        return early_stop, _typed(table, "early_stop_epoch", int, None, prefix)
    return None, None


def _member_tables(table: Mapping[str, Any], count: int) -> list:
    tables = table.get("members", [])
    if not isinstance(tables, list):
        raise ConfigError("teacher.members", "must be an array of tables")
    if tables and len(tables) != count:
        raise ConfigError("teacher.members", f"need {count} member tables, got {len(tables)}")
    for i, entry in enumerate(tables):
        if not isinstance(entry, Mapping):
            raise ConfigError(f"teacher.members[{i}]", "must be a table")
        _reject_unknown(entry, _MEMBER_KEYS, f"teacher.members[{i}]")
    return [dict(entry) for entry in tables] or [{} for _ in range(count)]


def _parse_member(
    entry: Mapping[str, Any], m: int, shared: TrainConfig, seed: int,
    stop: Tuple[Optional[Union[int, str]], Optional[int]],
) -> TeacherMember:
    prefix = f"teacher.members[{m}]"
    seed = _typed(entry, "seed", int, seed, prefix)
    standard = _typed(entry, "standard", bool, False, prefix)
    attack = shared.attack
    if "attack" in entry:
        if standard:
            raise ConfigError(f"{prefix}.standard", "a standard member cannot also set an attack")
        attack = parse_attack(_section(entry, "attack", f"{prefix}."), f"{prefix}.attack")
        if attack.restarts != 1:
            raise ConfigError(f"{prefix}.attack.restarts", "training attacks run a single restart")
    elif standard:
        attack = None
    monitor = shared.monitor_attack
    if "monitor_attack" in entry:
        monitor = parse_attack(_section(entry, "monitor_attack", f"{prefix}."), f"{prefix}.monitor_attack")
    early_stop, fixed_epoch = stop
    if early_stop == "best_robust" and attack is None and monitor is None:
        field_name = f"{prefix}.early_stop_epoch" if "early_stop_epoch" in entry else "teacher.early_stop_epoch"
        raise ConfigError(field_name, "'best_robust' needs an attack or a monitor_attack")
    train_cfg = _wrap(
        prefix, lambda: replace(shared, seed=seed, attack=attack, monitor_attack=monitor, early_stop_epoch=fixed_epoch)
    )
    return TeacherMember(seed, train_cfg, early_stop)


def _parse_teacher(doc: Mapping[str, Any], analysis: AnalysisConfig) -> TeacherConfig:
    table = _section(doc, "teacher", required=True)
    _reject_unknown(
        table,
        _TRAIN_KEYS | {"count", "seeds", "beta", "early_stop_epoch", "checkpoint_every_epoch", "members"},
        "teacher",
    )
    count = _typed(table, "count", int, 1, "teacher")
    if count < 1:
        raise ConfigError("teacher.count", "must be at least 1")
    seeds = tuple(table.get("seeds", range(count)))
    if len(seeds) != count or len(set(seeds)) != count:
        raise ConfigError("teacher.seeds", f"need {count} distinct seeds")
    beta = tuple(float(b) for b in table.get("beta", ()))
    if beta:
        if len(beta) != count:
            raise ConfigError("teacher.beta", f"need {count} weights, got {len(beta)}")
        if any(b < 0 for b in beta):
            raise ConfigError("teacher.beta", "weights must be nonnegative")
        if abs(math.fsum(beta) - 1.0) > 1e-9:
            raise ConfigError("teacher.beta", f"weights sum to {math.fsum(beta)!r}, expected 1")

    early_stop, fixed_epoch = _parse_early_stop(table, "teacher")
    entries = _member_tables(table, count)
    stops = [
        _parse_early_stop(entry, f"teacher.members[{m}]") if "early_stop_epoch" in entry else (early_stop, fixed_epoch)
        for m, entry in enumerate(entries)
    ]
    metrics = [raw for raw, _ in stops if isinstance(raw, str)]
    every_epoch = _typed(table, "checkpoint_every_epoch", bool, analysis.enabled or bool(metrics), "teacher")
    if metrics and not every_epoch:
        raise ConfigError("teacher.checkpoint_every_epoch", f"'{metrics[0]}' needs a checkpoint at every epoch")
    train_cfg = _parse_train(
        table, "teacher", batch_size=128, default_schedule=ScheduleKind.EXPONENTIAL.value,
        loss=LossVariant(LossTag.CE), early_stop_epoch=fixed_epoch, checkpoint_every_epoch=every_epoch,
    )
    members = tuple(_parse_member(entry, m, train_cfg, seeds[m], stops[m]) for m, entry in enumerate(entries))
    return TeacherConfig(count, tuple(member.seed for member in members), beta, train_cfg, early_stop, members)


def _parse_student(doc: Mapping[str, Any], teacher: TeacherConfig, analysis: AnalysisConfig) -> StudentConfig:
    table = _section(doc, "student", required=True)
    _reject_unknown(table, _TRAIN_KEYS | {"loss", "record_trajectories", "checkpoint_every_epoch"}, "student")
    loss_table = _section(table, "loss", "student.")
    _reject_unknown(loss_table, {"tag", "lambda", "alpha"}, "student.loss")
    tag = loss_table.get("tag", LossTag.CE.value)
    if tag not in {t.value for t in LossTag}:
        raise ConfigError("student.loss.tag", f"unknown loss '{tag}'")
    loss = _wrap(
        "student.loss",
        lambda: LossVariant(
            tag, _typed(loss_table, "lambda", float, 0.0, "student.loss"),
            _typed(loss_table, "alpha", float, 1.0, "student.loss"),
        ),
    )
    if loss.requires_ensemble and teacher.count < 2:
        raise ConfigError("student.loss.tag", "ENSEMBLE_AKD needs teacher.count >= 2")
    if loss.tag in (LossTag.ARD, LossTag.RSLAD, LossTag.RSLAD_LM, LossTag.AKD, LossTag.ENSEMBLE_AKD) \
            and "attack" not in table:
        raise ConfigError("student.attack", f"{loss.tag.value} trains on adversarial inputs and needs an attack")
    every_epoch = _typed(table, "checkpoint_every_epoch", bool, analysis.enabled, "student")
    train_cfg = _parse_train(
        table, "student", batch_size=256, default_schedule=ScheduleKind.ONE_CYCLE.value, loss=loss,
        early_stop_epoch=None, checkpoint_every_epoch=every_epoch,
    )
    return StudentConfig(train_cfg, _typed(table, "record_trajectories", bool, False, "student"))


def _parse_eval(doc: Mapping[str, Any]) -> EvalConfig:
    table = _section(doc, "eval")
    _reject_unknown(table, {"attacks"}, "eval")
    attacks = []
    for i, entry in enumerate(table.get("attacks", [])):
        prefix = f"eval.attacks[{i}]"
        if not isinstance(entry, Mapping):
            raise ConfigError(prefix, "must be a table")
        name = entry.get("name", f"attack{i}")
        if any(name == existing for existing, _ in attacks):
            raise ConfigError(f"{prefix}.name", f"duplicate attack name '{name}'")
        attacks.append((name, parse_attack(entry, prefix)))
    return EvalConfig(tuple(attacks))


def parse_config(
    document: Mapping[str, Any], *, output_dir: Optional[Union[str, Path]] = None, base_dir: Path = Path(".")
) -> ExperimentConfig:
    """Validate a parsed TOML document; every failure names the offending field."""
    _reject_unknown(
        document, {"name", "output_dir", "dataset", "model", "teacher", "student", "eval", "analysis"}, "config"
    )
    name = document.get("name")
    if not isinstance(name, str) or not name:
        raise ConfigError("name", "experiment name is required")
    out = output_dir if output_dir is not None else document.get("output_dir")
    if not out:
        raise ConfigError("output_dir", "set output_dir in the config or pass --output-dir")

    dataset = _parse_dataset(document)
    model = _parse_model(document, dataset)
    analysis = _parse_analysis(document)
    teacher = _parse_teacher(document, analysis)
    student = _parse_student(document, teacher, analysis)
    if analysis.enabled:
        if teacher.train.epochs != student.train.epochs:
            raise ConfigError("analysis.enabled", "trajectory comparison needs teacher.epochs == student.epochs")
        if analysis.teacher_member >= teacher.count:
            raise ConfigError("analysis.teacher_member", f"only {teacher.count} teacher(s) configured")
        if analysis.split == "train" and analysis.extremes > dataset.n_train \
                or analysis.split == "test" and analysis.extremes > dataset.n_test:
            raise ConfigError("analysis.extremes", "larger than the analysed split")

    out_path = Path(out)
    if not out_path.is_absolute():
        out_path = base_dir / out_path if output_dir is None else out_path
    return ExperimentConfig(
        name=name,
        output_dir=out_path,
        dataset=dataset,
        model=model,
        teacher=teacher,
        student=student,
        eval=_parse_eval(document),
        analysis=analysis,
        config_hash=config_hash(document),
        base_dir=base_dir,
    )


def load_config(path: Union[str, Path], output_dir: Optional[Union[str, Path]] = None) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "rb") as f:
            document = tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError("--config", f"{path} not found") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError("--config", f"{path} is not valid TOML: {e}") from e
    return parse_config(document, output_dir=output_dir, base_dir=path.parent)
