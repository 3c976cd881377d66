"""
Desk-scale directional experiments on two moons. These train dozens of
models and are excluded from the default run; use ``pytest -m slow``.
"""

import numpy as np
import pytest

from akd_lab.analysis import mean_entropy
from akd_lab.attacks import AttackConfig, ce_loss_grad, pgd
from akd_lab.checkpoint import load_checkpoint
from akd_lab.data import gen_two_moons
from akd_lab.losses import LossVariant
from akd_lab.models import Model, ModelSpec
from akd_lab.training import Schedule, TrainConfig, evaluate, select_early_stop_epoch, train

pytestmark = pytest.mark.slow

EPS = 0.1
EPOCHS = 50
SEEDS = range(5)
SPEC = ModelSpec("mlp", (2,), (64, 64, 2), 2)
TRAIN_ATTACK = AttackConfig(epsilon=EPS, step_size=0.025, iterations=7)
EVAL_ATTACK = AttackConfig.strong_eval(EPS, step_size=0.025, seed=99)


@pytest.fixture(scope="module")
def moons_split():
    return gen_two_moons(2000, 0.1, seed=0), gen_two_moons(1000, 0.1, seed=1, split="test")


def _teacher_cfg(attack):
    return TrainConfig(
        epochs=EPOCHS, batch_size=128, seed=100, schedule=Schedule("exponential", base_lr=0.1, decay=0.95),
        attack=attack, monitor_attack=TRAIN_ATTACK, checkpoint_every_epoch=True,
    )


def _student_cfg(seed, loss):
    return TrainConfig(
        epochs=EPOCHS, batch_size=128, seed=seed, schedule=Schedule("one_cycle", max_lr=0.21),
        loss=loss, attack=TRAIN_ATTACK,
    )


def _early_stopped_teacher(train_set, test_set, attack, tmp_dir):
    result = train(SPEC, train_set, _teacher_cfg(attack), eval_set=test_set, checkpoint_dir=tmp_dir)
    epoch = select_early_stop_epoch(result.run_log, "robust_acc")
    return load_checkpoint(result.checkpoints[epoch]).model


@pytest.fixture(scope="module")
def robust_teacher(moons_split, tmp_path_factory):
    return _early_stopped_teacher(*moons_split, TRAIN_ATTACK, tmp_path_factory.mktemp("robust"))


@pytest.fixture(scope="module")
def standard_teacher(moons_split):
    train_set, test_set = moons_split
    return Model(SPEC, train(SPEC, train_set, _teacher_cfg(None), eval_set=test_set).params)


@pytest.fixture(scope="module")
def at_students(moons_split):
    train_set, test_set = moons_split
    return [train(SPEC, train_set, _student_cfg(s, LossVariant("CE")), eval_set=test_set).params for s in SEEDS]


def _akd_students(moons_split, teacher, alpha):
    train_set, test_set = moons_split
    loss = LossVariant("AKD", alpha=alpha)
    return [train(SPEC, train_set, _student_cfg(s, loss), teacher, eval_set=test_set).params for s in SEEDS]


@pytest.fixture(scope="module")
def akd_students(moons_split, robust_teacher):
    return _akd_students(moons_split, robust_teacher, 0.75)


def test_pgd_raises_loss_on_trained_model(robust_teacher, moons_split):
    _, test_set = moons_split
    frozen = robust_teacher.bind()
    x, y = test_set.inputs[:512], test_set.labels[:512]
    x_adv = pgd(frozen, x, y, AttackConfig(epsilon=EPS, step_size=0.025, iterations=7, seed=3))
    before, _ = ce_loss_grad(frozen, x, y)
    after, _ = ce_loss_grad(frozen, x_adv, y)
    assert np.mean(after >= before) >= 0.95


def test_robust_teacher_improves_student_robustness(akd_students, at_students, moons_split):
    _, test_set = moons_split
    akd = akd_students
    at_robust = [evaluate(p, SPEC, test_set, EVAL_ATTACK)[1] for p in at_students]
    akd_robust = [evaluate(p, SPEC, test_set, EVAL_ATTACK)[1] for p in akd]
    assert np.median(akd_robust) >= np.median(at_robust)


def test_standard_teacher_improves_clean_accuracy(standard_teacher, at_students, moons_split):
    _, test_set = moons_split
    akd = _akd_students(moons_split, standard_teacher, 0.5)
    at_clean = [evaluate(p, SPEC, test_set)[0] for p in at_students]
    akd_clean = [evaluate(p, SPEC, test_set)[0] for p in akd]
    assert np.median(akd_clean) >= np.median(at_clean)


def test_distilled_student_is_less_confident(akd_students, at_students, moons_split):
    train_set, _ = moons_split
    akd = akd_students
    at_entropy = [mean_entropy(p, SPEC, train_set) for p in at_students]
    akd_entropy = [mean_entropy(p, SPEC, train_set) for p in akd]
    assert np.median(akd_entropy) >= np.median(at_entropy)
