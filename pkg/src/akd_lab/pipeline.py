"""
Orchestration behind the ``train-teacher``, ``train-student``, ``evaluate``
and ``analyze`` subcommands.

Output layout::

    <output_dir>/
        artifacts.json
        timings.jsonl
        teachers/member<i>/teacher_ep<k>.ckpt, runlog.jsonl
        student/student_ep<k>.ckpt, student_final.ckpt, runlog.jsonl
        metrics/<model>.jsonl
        analysis/*.tsv
"""

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from .analysis import (
    DifficultyRanking,
    cosine_series,
    difficulty_scores,
    entropy_series,
    improvement_curve,
    mean_entropy_of,
    moving_average,
    rank_extremes,
    record_trajectories,
    trajectories_from_snapshots,
    write_tsv,
)
from .artifacts import ArtifactIndex, RoleEntry, student_dir, teacher_dir, teacher_role
from .attacks import AttackConfig
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config
from .errors import ArtifactError, ConfigError
from .models import Model, Teacher, stack_members
from .training import RunLog, evaluate_model, select_early_stop_epoch, train

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
STUDENT_ROLE = "student"


def _record_timing(cfg: ExperimentConfig, command: str, role: str, seconds: float) -> None:
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    with open(cfg.output_dir / "timings.jsonl", "a", encoding="utf-8") as f:
        f.write(json.dumps({"command": command, "role": role, "seconds": round(seconds, 3)}, sort_keys=True) + "\n")


def _relative(cfg: ExperimentConfig, path: Path) -> str:
    return Path(path).relative_to(cfg.output_dir).as_posix()


def _load_model(cfg: ExperimentConfig, path: Path, role: str) -> Checkpoint:
    ckpt = load_checkpoint(path)
    if ckpt.spec != cfg.model:
        raise ArtifactError(path, f"{role} checkpoint was trained for a different model spec")
    produced_by = ckpt.metadata.get("config_hash")
    if produced_by and produced_by != cfg.config_hash:
        logger.warning(f"{path} was produced by config {produced_by[:12]}, current config is {cfg.config_hash[:12]}")
    return ckpt


def train_teacher_member(cfg: ExperimentConfig, member: int) -> Tuple[RoleEntry, float]:
    """Train one ensemble member; runs in a worker process when ``--jobs`` > 1."""
    start = time.perf_counter()
    role = teacher_role(member)
    settings = cfg.teacher.members[member]
    seed = settings.seed
    out = teacher_dir(cfg.output_dir, member)
    train_cfg = settings.train
    kind = "standard" if train_cfg.attack is None else train_cfg.attack.method.value
    logger.info(f"Training {role} (seed {seed}, {kind}) for {train_cfg.epochs} epochs")
    result = train(
        cfg.model,
        cfg.load_dataset("train"),
        train_cfg,
        eval_set=cfg.load_dataset("test"),
        checkpoint_dir=out,
        checkpoint_prefix="teacher",
        checkpoint_metadata={"config_hash": cfg.config_hash, "role": role, "experiment": cfg.name},
    )
    designated = train_cfg.early_stop_epoch
    if settings.early_stop_metric:
        designated = select_early_stop_epoch(result.run_log, settings.early_stop_metric)
        logger.info(f"{role}: early stopping at epoch {designated} ({settings.early_stop})")
    runlog = result.run_log.to_jsonl(out / "runlog.jsonl", extra={"config_hash": cfg.config_hash, "role": role})
    entry = RoleEntry(
        role=role,
        seed=seed,
        config_hash=cfg.config_hash,
        runlog=_relative(cfg, runlog),
        checkpoints={str(k): _relative(cfg, p) for k, p in sorted(result.checkpoints.items())},
        designated_epoch=designated,
    )
    return entry, time.perf_counter() - start


def cmd_train_teacher(config_path: PathLike, output_dir: Optional[PathLike] = None, jobs: int = 1) -> List[RoleEntry]:
    """Train every teacher member; members are independent and may run in parallel."""
    if jobs < 1:
        raise ConfigError("--jobs", "must be at least 1")
    cfg = load_config(config_path, output_dir)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    members = list(range(cfg.teacher.count))
    if jobs > 1 and len(members) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(members))) as pool:
            results = list(pool.map(train_teacher_member, [cfg] * len(members), members))
    else:
        results = [train_teacher_member(cfg, m) for m in members]

    index = ArtifactIndex(cfg.output_dir)
    for entry, seconds in results:
        index.record(entry)
        _record_timing(cfg, "train-teacher", entry.role, seconds)
    return [entry for entry, _ in results]


def _teacher_epoch(cfg: ExperimentConfig, index: ArtifactIndex, member: int) -> int:
    """Designated epoch of a member: indexed choice, else recomputed from its run log, else final."""
    role = teacher_role(member)
    indexed = index.designated_epoch(role)
    if indexed is not None:
        return indexed
    settings = cfg.teacher.members[member]
    if settings.train.early_stop_epoch is not None:
        return settings.train.early_stop_epoch
    if settings.early_stop_metric:
        runlog = teacher_dir(cfg.output_dir, member) / "runlog.jsonl"
        return select_early_stop_epoch(RunLog.from_jsonl(runlog), settings.early_stop_metric)
    return settings.train.epochs


def _teacher_path(cfg: ExperimentConfig, index: ArtifactIndex, member: int, epoch: int) -> Path:
    fallback = teacher_dir(cfg.output_dir, member) / f"teacher_ep{epoch}.ckpt"
    return index.checkpoint_path(teacher_role(member), epoch, fallback)


def load_teacher_members(cfg: ExperimentConfig, index: ArtifactIndex) -> List[Tuple[int, Checkpoint]]:
    """Designated checkpoint of every member; all missing files are reported together."""
    paths = []
    for member in range(cfg.teacher.count):
        epoch = _teacher_epoch(cfg, index, member)
        paths.append((member, _teacher_path(cfg, index, member, epoch)))
    missing = [str(p) for _, p in paths if not p.exists()]
    if missing:
        raise ArtifactError(cfg.output_dir, f"missing teacher checkpoints: {', '.join(missing)}", missing)
    return [(member, _load_model(cfg, path, teacher_role(member))) for member, path in paths]


def load_teacher(cfg: ExperimentConfig, index: ArtifactIndex) -> Teacher:
    members = [ckpt.model for _, ckpt in load_teacher_members(cfg, index)]
    if len(members) == 1:
        return members[0]
    return stack_members(members, cfg.teacher.beta or None)


def cmd_train_student(config_path: PathLike, output_dir: Optional[PathLike] = None) -> RoleEntry:
    cfg = load_config(config_path, output_dir)
    index = ArtifactIndex(cfg.output_dir)
    train_cfg = cfg.student.train
    # Teachers are resolved before any training starts.
    teacher = load_teacher(cfg, index) if train_cfg.loss.requires_teacher else None

    start = time.perf_counter()
    out = student_dir(cfg.output_dir)
    record_set = cfg.load_dataset(cfg.analysis.split) if cfg.student.record_trajectories else None
    metadata = {
        "config_hash": cfg.config_hash,
        "role": STUDENT_ROLE,
        "experiment": cfg.name,
        "loss": train_cfg.loss.tag.value,
    }
    logger.info(f"Training student with {train_cfg.loss.tag.value} for {train_cfg.epochs} epochs")
    result = train(
        cfg.model,
        cfg.load_dataset("train"),
        train_cfg,
        teacher,
        eval_set=cfg.load_dataset("test"),
        record_set=record_set,
        checkpoint_dir=out,
        checkpoint_prefix="student",
        checkpoint_metadata=metadata,
    )
    final = save_checkpoint(
        result.params, out / "student_final.ckpt", spec=cfg.model, epoch=train_cfg.epochs, metadata=metadata
    )
    runlog = result.run_log.to_jsonl(out / "runlog.jsonl", extra={"config_hash": cfg.config_hash, "role": STUDENT_ROLE})
    if record_set is not None:
        trajectories = trajectories_from_snapshots(result.run_log.snapshots)
        epochs = [f"ep{k}" for k in range(1, train_cfg.epochs + 1)]
        write_tsv(
            out / "trajectories_recorded.tsv",
            ["sample_id", *epochs],
            [[t.sample_id, *t.probs.tolist()] for t in trajectories],
        )

    checkpoints = {str(k): _relative(cfg, p) for k, p in sorted(result.checkpoints.items())}
    checkpoints["final"] = _relative(cfg, final)
    entry = RoleEntry(
        STUDENT_ROLE, train_cfg.seed, cfg.config_hash, _relative(cfg, runlog), checkpoints, train_cfg.epochs
    )
    index.record(entry)
    _record_timing(cfg, "train-student", STUDENT_ROLE, time.perf_counter() - start)
    return entry


def _student_final_path(cfg: ExperimentConfig, index: ArtifactIndex) -> Path:
    entry = index.get(STUDENT_ROLE)
    if entry is not None and "final" in entry.checkpoints:
        return index.resolve(entry.checkpoints["final"])
    return student_dir(cfg.output_dir) / "student_final.ckpt"


def _metric_records(
    cfg: ExperimentConfig, name: str, model, attacks: Sequence[Tuple[str, AttackConfig]], seeds: List[int],
    test_set,
) -> List[Dict]:
    bound = model.bind()
    clean_acc, _ = evaluate_model(bound, test_set)
    base = {
        "experiment": cfg.name,
        "model": name,
        "clean_acc": clean_acc,
        "mean_entropy": mean_entropy_of(bound, test_set),
        "config_hash": cfg.config_hash,
        "seeds": seeds,
        "n": len(test_set),
    }
    if not attacks:
        return [{**base, "attack": None, "robust_acc": None}]
    records = []
    for attack_name, attack in attacks:
        _, robust_acc = evaluate_model(bound, test_set, attack)
        records.append(
            {**base, "attack": attack_name, "method": attack.method.value, "epsilon": attack.epsilon,
             "robust_acc": robust_acc}
        )
        logger.info(f"{name}: clean={clean_acc:.4f} {attack_name}={robust_acc:.4f}")
    return records


def cmd_evaluate(config_path: PathLike, output_dir: Optional[PathLike] = None) -> List[Path]:
    """Evaluate every teacher member, the ensemble (M > 1) and the student; one metrics file per model."""
    cfg = load_config(config_path, output_dir)
    index = ArtifactIndex(cfg.output_dir)
    student_path = _student_final_path(cfg, index)
    if not student_path.exists():
        raise ArtifactError(student_path, "student checkpoint not found; run train-student first", [str(student_path)])
    members = load_teacher_members(cfg, index)
    student = _load_model(cfg, student_path, STUDENT_ROLE)

    start = time.perf_counter()
    test_set = cfg.load_dataset("test")
    attacks = cfg.eval.attacks
    models = [(f"teacher{m}", ckpt.model, [cfg.teacher.seeds[m]]) for m, ckpt in members]
    if len(members) > 1:
        ensemble = stack_members([ckpt.model for _, ckpt in members], cfg.teacher.beta or None)
        models.append(("ensemble", ensemble, list(cfg.teacher.seeds)))
    models.append((STUDENT_ROLE, student.model, [cfg.student.train.seed]))

    written = []
    for name, model, seeds in models:
        path = cfg.output_dir / "metrics" / f"{name}.jsonl"
        path.parent.mkdir(parents=True, exist_ok=True)
        records = _metric_records(cfg, name, model, attacks, seeds, test_set)
        path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records), encoding="utf-8")
        written.append(path)
    _record_timing(cfg, "evaluate", "all", time.perf_counter() - start)
    return written


def _snapshot_paths(cfg: ExperimentConfig, index: ArtifactIndex, epochs: int) -> Tuple[List[Path], List[Path]]:
    member = cfg.analysis.teacher_member
    teacher_paths = [_teacher_path(cfg, index, member, k) for k in range(1, epochs + 1)]
    student_paths = [
        index.checkpoint_path(STUDENT_ROLE, k, student_dir(cfg.output_dir) / f"student_ep{k}.ckpt")
        for k in range(1, epochs + 1)
    ]
    missing_t = [k for k, p in enumerate(teacher_paths, 1) if not p.exists()]
    missing_s = [k for k, p in enumerate(student_paths, 1) if not p.exists()]
    if missing_t or missing_s:
        raise ArtifactError(
            cfg.output_dir,
            f"missing snapshots: teacher epochs {missing_t}, student epochs {missing_s}",
            [f"teacher:{k}" for k in missing_t] + [f"student:{k}" for k in missing_s],
        )
    return teacher_paths, student_paths


def _smoothing_window(requested: int, n: int) -> int:
    largest_odd = n if n % 2 else n - 1
    return max(1, min(requested, largest_odd))


def cmd_analyze(config_path: PathLike, output_dir: Optional[PathLike] = None) -> List[Path]:
    """Difficulty ranking, trajectories, improvement and cosine curves, entropy series."""
    cfg = load_config(config_path, output_dir)
    if not cfg.analysis.enabled:
        raise ConfigError("analysis.enabled", "analysis is disabled for this experiment")
    index = ArtifactIndex(cfg.output_dir)
    epochs = cfg.teacher.train.epochs
    teacher_paths, student_paths = _snapshot_paths(cfg, index, epochs)
    teachers: List[Model] = [_load_model(cfg, p, "teacher").model for p in teacher_paths]
    students: List[Model] = [_load_model(cfg, p, STUDENT_ROLE).model for p in student_paths]

    start = time.perf_counter()
    data = cfg.load_dataset(cfg.analysis.split)
    out = cfg.output_dir / "analysis"
    written = []

    scores = difficulty_scores(teachers, data.inputs, data.labels)
    ranking = DifficultyRanking.from_scores(scores)
    written.append(write_tsv(
        out / "difficulty.tsv",
        ["rank", "sample_id", "label", "difficulty"],
        [[rank, i, int(data.labels[i]), s] for rank, (i, s) in enumerate(ranking.entries)],
    ))
    easiest, hardest = rank_extremes(ranking, cfg.analysis.extremes)
    written.append(write_tsv(
        out / "extremes.tsv",
        ["which", "position", "sample_id", "difficulty"],
        [["easiest", p, i, float(scores[i])] for p, i in enumerate(easiest)]
        + [["hardest", p, i, float(scores[i])] for p, i in enumerate(hardest)],
    ))

    train_set = cfg.load_dataset("train")
    teacher_entropy = entropy_series(teachers, train_set)
    student_entropy = entropy_series(students, train_set)
    written.append(write_tsv(
        out / "entropy.tsv",
        ["epoch", "teacher_entropy", "student_entropy"],
        [[k, t, s] for k, (t, s) in enumerate(zip(teacher_entropy, student_entropy), 1)],
    ))

    window = _smoothing_window(cfg.analysis.smoothing_window, len(data))
    kinds: List[Tuple[str, Optional[AttackConfig]]] = [("natural", None)]
    if cfg.analysis.attack is not None:
        kinds.append(("adversarial", cfg.analysis.attack))
    for kind, attack in kinds:
        t_trajs = record_trajectories(teachers, data.inputs, data.labels, attack, model_tag="teacher")
        s_trajs = record_trajectories(students, data.inputs, data.labels, attack, model_tag="student")
        deltas = improvement_curve(s_trajs, t_trajs, ranking)
        cosines = cosine_series(s_trajs, t_trajs, ranking)
        by_id_t = {t.sample_id: t for t in t_trajs}
        by_id_s = {t.sample_id: t for t in s_trajs}

        written.append(write_tsv(
            out / f"samples_{kind}.tsv",
            ["sample_id", "rank", "difficulty", "p_T_K", "p_S_K", "delta", "cossim", "inner_product"],
            [
                [i, rank, s, by_id_t[i].final, by_id_s[i].final, delta, cos, inner]
                for (i, s), (rank, delta), (_, cos, inner) in zip(ranking.entries, deltas, cosines)
            ],
        ))
        epoch_cols = [f"ep{k}" for k in range(1, epochs + 1)]
        written.append(write_tsv(
            out / f"trajectories_{kind}.tsv",
            ["sample_id", "model", *epoch_cols],
            [[t.sample_id, t.model_tag, *t.probs.tolist()] for pair in zip(t_trajs, s_trajs) for t in pair],
        ))
        delta_values = [d for _, d in deltas]
        cos_values = [c for _, c, _ in cosines]
        written.append(write_tsv(
            out / f"curves_{kind}.tsv",
            ["rank", "delta", "delta_smoothed", "cossim", "cossim_smoothed"],
            [
                list(row)
                for row in zip(
                    range(len(ranking)), delta_values, moving_average(delta_values, window),
                    cos_values, moving_average(cos_values, window),
                )
            ],
        ))
    manifest = {"config_hash": cfg.config_hash, "tables": [p.name for p in written]}
    (out / "tables.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _record_timing(cfg, "analyze", "all", time.perf_counter() - start)
    logger.info(f"Wrote {len(written)} analysis tables to {out}")
    return written
