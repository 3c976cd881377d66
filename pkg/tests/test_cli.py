import json

import pytest
from click.testing import CliRunner

from akd_lab import __version__
from akd_lab.artifacts import INDEX_NAME, ArtifactIndex
from akd_lab.cli import main

STEPS = ["train-teacher", "train-student", "evaluate", "analyze"]


@pytest.fixture
def runner():
    return CliRunner()


def _run(runner, command, config, *extra):
    return runner.invoke(main, [command, "--config", str(config), *extra])


def _pipeline(runner, config, *extra):
    for command in STEPS:
        result = _run(runner, command, config, *extra)
        assert result.exit_code == 0, f"{command}: {result.output}"
        assert "✅" in result.output


def _read_jsonl(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_full_pipeline(runner, write_config):
    config = write_config()
    _pipeline(runner, config)
    out = config.parent / "out"

    assert sorted(p.name for p in (out / "teachers" / "member0").iterdir()) == [
        "runlog.jsonl", "teacher_ep1.ckpt", "teacher_ep2.ckpt",
    ]
    assert sorted(p.name for p in (out / "student").iterdir()) == [
        "runlog.jsonl", "student_ep1.ckpt", "student_ep2.ckpt", "student_final.ckpt",
    ]
    assert sorted(p.name for p in (out / "metrics").iterdir()) == ["student.jsonl", "teacher0.jsonl"]
    assert len(list((out / "analysis").glob("*.tsv"))) == 9

    records = _read_jsonl(out / "metrics" / "student.jsonl")
    assert [r["attack"] for r in records] == ["null", "pgd"]
    null, pgd = records
    assert null["robust_acc"] == null["clean_acc"]
    assert pgd["robust_acc"] <= pgd["clean_acc"]
    assert null["n"] == 24 and len(null["config_hash"]) == 64

    index = ArtifactIndex(out)
    assert index.roles() == ["student", "teacher/0"]
    assert (out / INDEX_NAME).exists()

    samples = (out / "analysis" / "samples_natural.tsv").read_text().splitlines()
    assert samples[0].split("\t") == [
        "sample_id", "rank", "difficulty", "p_T_K", "p_S_K", "delta", "cossim", "inner_product",
    ]
    assert len(samples) == 1 + 24
    manifest = json.loads((out / "analysis" / "tables.json").read_text())
    assert manifest["config_hash"] == null["config_hash"]
    assert sorted(manifest["tables"]) == sorted(p.name for p in (out / "analysis").glob("*.tsv"))


def test_rerun_is_byte_identical(runner, write_config, tmp_path):
    config = write_config()
    _pipeline(runner, config, "--output-dir", str(tmp_path / "a"))
    _pipeline(runner, config, "--output-dir", str(tmp_path / "b"))
    a_files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    b_files = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert a_files == b_files
    for rel in a_files:
        if rel.name == "timings.jsonl":
            continue
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_invalid_config_exits_2(runner, write_config, config_text):
    config = write_config(config_text.replace("alpha = 0.5", "alpha = 2.0"))
    result = _run(runner, "train-teacher", config)
    assert result.exit_code == 2
    assert "student.loss.alpha" in result.output


def test_missing_config_exits_2(runner, tmp_path):
    assert _run(runner, "evaluate", tmp_path / "nope.toml").exit_code == 2


def test_student_without_teacher_exits_3(runner, write_config):
    result = _run(runner, "train-student", write_config())
    assert result.exit_code == 3
    assert "missing teacher checkpoints" in result.output


def test_evaluate_without_student_exits_3(runner, write_config):
    config = write_config()
    assert _run(runner, "train-teacher", config).exit_code == 0
    assert _run(runner, "evaluate", config).exit_code == 3


def test_missing_snapshot_exits_3(runner, write_config):
    config = write_config()
    for command in STEPS[:2]:
        assert _run(runner, command, config).exit_code == 0
    (config.parent / "out" / "student" / "student_ep1.ckpt").unlink()
    result = _run(runner, "analyze", config)
    assert result.exit_code == 3
    assert "student epochs [1]" in result.output


def test_corrupt_checkpoint_exits_3(runner, write_config):
    config = write_config()
    for command in STEPS[:2]:
        assert _run(runner, command, config).exit_code == 0
    final = config.parent / "out" / "student" / "student_final.ckpt"
    final.write_bytes(final.read_bytes()[:-10])
    assert _run(runner, "evaluate", config).exit_code == 3


def test_ensemble_metrics(runner, write_config, config_text):
    text = config_text.replace("count = 1", "count = 2").replace('tag = "AKD"', 'tag = "ENSEMBLE_AKD"')
    config = write_config(text)
    for command in STEPS[:3]:
        result = _run(runner, command, config)
        assert result.exit_code == 0, result.output
    metrics = config.parent / "out" / "metrics"
    assert sorted(p.name for p in metrics.iterdir()) == [
        "ensemble.jsonl", "student.jsonl", "teacher0.jsonl", "teacher1.jsonl",
    ]
    ensemble = _read_jsonl(metrics / "ensemble.jsonl")
    assert ensemble[0]["seeds"] == [0, 1]


def test_fixed_early_stop_is_indexed(runner, write_config, config_text):
    config = write_config(config_text.replace("count = 1", "count = 1\nearly_stop_epoch = 1"))
    result = _run(runner, "train-teacher", config)
    assert result.exit_code == 0
    assert "teacher/0@ep1" in result.output
    assert ArtifactIndex(config.parent / "out").designated_epoch("teacher/0") == 1


def test_version(runner):
    result = runner.invoke(main, ["--version"])
    assert result.exit_code == 0
    assert __version__ in result.output


def test_mixed_standard_and_adversarial_teachers(runner, write_config, config_text):
    text = config_text.replace("count = 1", "count = 2\nbeta = [0.3, 0.7]").replace(
        'tag = "AKD"', 'tag = "ENSEMBLE_AKD"'
    )
    text += '\n[[teacher.members]]\nstandard = true\n\n[[teacher.members]]\nearly_stop_epoch = "best_robust"\n'
    config = write_config(text)
    for command in STEPS[:3]:
        result = _run(runner, command, config)
        assert result.exit_code == 0, result.output
    out = config.parent / "out"

    standard = _read_jsonl(out / "teachers" / "member0" / "runlog.jsonl")
    robust = _read_jsonl(out / "teachers" / "member1" / "runlog.jsonl")
    assert all(r["robust_acc"] is None and r["attack_grad_evals"] == 0 for r in standard)
    assert all(r["robust_acc"] is not None and r["attack_grad_evals"] > 0 for r in robust)

    index = ArtifactIndex(out)
    assert index.designated_epoch("teacher/0") is None
    assert index.designated_epoch("teacher/1") in (1, 2)
    ensemble = _read_jsonl(out / "metrics" / "ensemble.jsonl")
    assert ensemble[0]["seeds"] == [0, 1]
