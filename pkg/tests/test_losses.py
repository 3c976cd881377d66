import numpy as np
import pytest

from akd_lab import autodiff as ad
from akd_lab.attacks import AttackConfig, pgd
from akd_lab.errors import ConfigError, DomainError
from akd_lab.losses import (
    LossTag,
    LossVariant,
    SoftTarget,
    akd_loss,
    ard_loss,
    ckd_loss,
    cross_entropy_soft,
    distillation_loss,
    kl_divergence,
    mix_labels,
    one_hot,
    rslad_loss,
)
from akd_lab.models import BoundModel, Model, Params, init_params, stack_members

F = 1e-12


def _ce(p, t):
    return float(np.mean(-np.sum(t * np.log(p + F), axis=1)))


def _kl(p, q):
    return float(np.mean(np.sum(q * np.log((q + F) / (p + F)), axis=1)))


@pytest.fixture
def setup(mlp_spec, moons):
    student = Model(mlp_spec, init_params(mlp_spec, 1)).bind(requires_grad=True)
    teacher = Model(mlp_spec, init_params(mlp_spec, 2)).bind()
    x, y = moons.inputs, moons.labels
    x_adv = pgd(teacher, x, y, AttackConfig(epsilon=0.05, step_size=0.02, iterations=2, seed=1))
    onehot = np.eye(2)[y]

    def p(model, inputs):
        return model.probs(ad.Tensor(inputs)).values

    return student, teacher, x, y, x_adv, onehot, p


def _value(variant, student, teacher, x, y, x_adv):
    return distillation_loss(variant, student, teacher, x, y, x_adv).item()


def test_ce(setup):
    student, teacher, x, y, x_adv, onehot, p = setup
    got = _value(LossVariant("CE"), student, None, x, y, x_adv)
    assert got == pytest.approx(_ce(p(student, x_adv), onehot), abs=1e-12)


def test_ckd(setup):
    student, teacher, x, y, x_adv, onehot, p = setup
    expected = 0.7 * _ce(p(student, x), onehot) + 0.3 * _kl(p(student, x), p(teacher, x))
    assert _value(LossVariant("CKD", lam=0.3), student, teacher, x, y, x_adv) == pytest.approx(expected, abs=1e-12)


def test_ard(setup):
    student, teacher, x, y, x_adv, onehot, p = setup
    expected = 0.4 * _ce(p(student, x), onehot) + 0.6 * _kl(p(student, x_adv), p(teacher, x))
    assert _value(LossVariant("ARD", lam=0.6), student, teacher, x, y, x_adv) == pytest.approx(expected, abs=1e-12)


def test_rslad(setup):
    student, teacher, x, y, x_adv, onehot, p = setup
    t = p(teacher, x)
    expected = 0.2 * _kl(p(student, x), t) + 0.8 * _kl(p(student, x_adv), t)
    assert _value(LossVariant("RSLAD", lam=0.8), student, teacher, x, y, x_adv) == pytest.approx(expected, abs=1e-12)


def test_rslad_with_label_mixing(setup):
    student, teacher, x, y, x_adv, onehot, p = setup
    t = 0.25 * p(teacher, x) + 0.75 * onehot
    expected = 0.5 * _kl(p(student, x), t) + 0.5 * _kl(p(student, x_adv), t)
    variant = LossVariant("RSLAD_LM", lam=0.5, alpha=0.25)
    assert _value(variant, student, teacher, x, y, x_adv) == pytest.approx(expected, abs=1e-12)


def test_akd(setup):
    student, teacher, x, y, x_adv, onehot, p = setup
    expected = _ce(p(student, x_adv), 0.6 * p(teacher, x_adv) + 0.4 * onehot)
    assert _value(LossVariant("AKD", alpha=0.6), student, teacher, x, y, x_adv) == pytest.approx(expected, abs=1e-12)


def test_ensemble_akd(setup, mlp_spec):
    student, _, x, y, x_adv, onehot, p = setup
    members = [Model(mlp_spec, init_params(mlp_spec, s)) for s in (3, 4)]
    ensemble = stack_members(members, (0.7, 0.3)).bind()
    mixed = 0.7 * p(members[0].bind(), x_adv) + 0.3 * p(members[1].bind(), x_adv)
    expected = _ce(p(student, x_adv), 0.5 * mixed + 0.5 * onehot)
    variant = LossVariant("ENSEMBLE_AKD", alpha=0.5)
    assert _value(variant, student, ensemble, x, y, x_adv) == pytest.approx(expected, abs=1e-12)


def test_akd_without_teacher_weight_is_adversarial_ce(setup):
    student, teacher, x, y, x_adv, _, _ = setup
    akd = _value(LossVariant("AKD", alpha=0.0), student, teacher, x, y, x_adv)
    ce = _value(LossVariant("CE"), student, None, x, y, x_adv)
    assert akd == pytest.approx(ce, abs=1e-12)


def test_ckd_without_teacher_weight_is_natural_ce(setup):
    student, teacher, x, y, x_adv, _, _ = setup
    ckd = _value(LossVariant("CKD", lam=0.0), student, teacher, x, y, x_adv)
    ce = _value(LossVariant("CE"), student, None, x, y, None)
    assert ckd == pytest.approx(ce, abs=1e-12)


def test_label_mixing_with_full_teacher_weight_is_rslad(setup):
    student, teacher, x, y, x_adv, _, _ = setup
    mixed = _value(LossVariant("RSLAD_LM", lam=0.4, alpha=1.0), student, teacher, x, y, x_adv)
    plain = _value(LossVariant("RSLAD", lam=0.4), student, teacher, x, y, x_adv)
    assert mixed == pytest.approx(plain, abs=1e-12)


def test_single_member_ensemble_matches_akd(setup, mlp_spec):
    student, teacher, x, y, x_adv, _, _ = setup
    single = Model(mlp_spec, init_params(mlp_spec, 2))
    ens = _value(LossVariant("ENSEMBLE_AKD", alpha=0.5), student, stack_members([single]).bind(), x, y, x_adv)
    akd = _value(LossVariant("AKD", alpha=0.5), student, teacher, x, y, x_adv)
    assert ens == pytest.approx(akd, abs=1e-12)


def test_only_student_receives_gradients(setup):
    student, teacher, x, y, x_adv, _, _ = setup
    ad.backward(distillation_loss(LossVariant("RSLAD", lam=0.5), student, teacher, x, y, x_adv))
    assert all(g is not None for g in student.gradients().values())
    assert all(g is None for g in teacher.gradients().values())


def test_kl_is_zero_for_identical_distributions():
    p = np.array([[0.2, 0.8], [0.5, 0.5]])
    assert kl_divergence(ad.Tensor(p), p).item() == pytest.approx(0.0, abs=1e-12)
    assert kl_divergence(ad.Tensor(p), np.array([[0.9, 0.1], [0.1, 0.9]])).item() > 0


def test_cross_entropy_of_one_hot():
    p = ad.Tensor([[0.25, 0.75]])
    assert cross_entropy_soft(p, one_hot(np.array([1]), 2)).item() == pytest.approx(-np.log(0.75 + F))


def test_mix_labels():
    mixed = mix_labels(np.array([[0.5, 0.5]]), one_hot(np.array([0]), 2), 0.5)
    np.testing.assert_allclose(mixed.probs, [[0.75, 0.25]])
    with pytest.raises(DomainError):
        mix_labels(np.array([[0.5, 0.5]]), one_hot(np.array([0]), 2), 1.5)


def test_soft_target_validation():
    with pytest.raises(DomainError):
        SoftTarget(np.array([[0.5, 0.6]]))
    with pytest.raises(DomainError):
        one_hot(np.array([2]), 2)


@pytest.mark.parametrize(
    "kwargs, field",
    [
        (dict(tag="XE"), "loss.tag"),
        (dict(tag="CKD", lam=1.5), "loss.lambda"),
        (dict(tag="AKD", alpha=-0.1), "loss.alpha"),
    ],
)
def test_variant_validation(kwargs, field):
    with pytest.raises(ConfigError) as excinfo:
        LossVariant(**kwargs)
    assert excinfo.value.field == field


def test_variant_requirements():
    assert not LossVariant("CE").requires_teacher
    assert LossVariant("ARD").requires_teacher
    assert LossVariant(LossTag.ENSEMBLE_AKD).requires_ensemble


def test_missing_teacher(setup):
    student, _, x, y, x_adv, _, _ = setup
    with pytest.raises(ConfigError):
        distillation_loss(LossVariant("AKD", alpha=0.5), student, None, x, y, x_adv)


def test_ensemble_loss_needs_ensemble(setup):
    student, teacher, x, y, x_adv, _, _ = setup
    with pytest.raises(ConfigError):
        distillation_loss(LossVariant("ENSEMBLE_AKD", alpha=0.5), student, teacher, x, y, x_adv)


def test_documented_values():
    mixed = mix_labels(np.array([[0.6, 0.4]]), one_hot(np.array([0]), 2), 0.8)
    np.testing.assert_allclose(mixed.probs, [[0.68, 0.32]], atol=1e-15)
    entropy = -(0.68 * np.log(0.68) + 0.32 * np.log(0.32))
    assert cross_entropy_soft(ad.Tensor([[0.68, 0.32]]), mixed).item() == pytest.approx(entropy, abs=1e-9)
    assert cross_entropy_soft(ad.Tensor([[0.5, 0.5]]), one_hot(np.array([1]), 2)).item() == pytest.approx(
        0.6931, abs=1e-4
    )
    assert kl_divergence(ad.Tensor([[0.5, 0.5]]), np.array([[1.0, 0.0]])).item() == pytest.approx(np.log(2), abs=1e-9)


def test_ard_with_clean_adversarial_inputs_is_ckd(setup):
    student, teacher, x, y, _, _, _ = setup
    ard = _value(LossVariant("ARD", lam=0.5), student, teacher, x, y, x)
    ckd = _value(LossVariant("CKD", lam=0.5), student, teacher, x, y, x)
    assert ard == pytest.approx(ckd, abs=1e-12)


def test_rslad_of_teacher_against_itself_is_zero(setup):
    _, teacher, x, y, _, _, _ = setup
    assert _value(LossVariant("RSLAD", lam=0.5), teacher, teacher, x, y, x) == pytest.approx(0.0, abs=1e-12)


def test_named_losses_match_dispatch(setup):
    student, teacher, x, y, x_adv, _, _ = setup
    pairs = [
        (ckd_loss(student, teacher, x, y, 0.3), LossVariant("CKD", lam=0.3)),
        (ard_loss(student, teacher, x, x_adv, y, 0.6), LossVariant("ARD", lam=0.6)),
        (rslad_loss(student, teacher, x, x_adv, 0.8), LossVariant("RSLAD", lam=0.8)),
        (
            rslad_loss(student, teacher, x, x_adv, 0.5, 0.25, y, label_mixing=True),
            LossVariant("RSLAD_LM", lam=0.5, alpha=0.25),
        ),
        (akd_loss(student, teacher, x_adv, y, 0.6), LossVariant("AKD", alpha=0.6)),
    ]
    for direct, variant in pairs:
        dispatched = distillation_loss(variant, student, teacher, x, y, x_adv)
        np.testing.assert_array_equal(direct.values, dispatched.values)


def test_label_mixed_rslad_needs_labels(setup):
    student, teacher, x, _, x_adv, _, _ = setup
    with pytest.raises(DomainError):
        rslad_loss(student, teacher, x, x_adv, 0.5, 0.25, label_mixing=True)


@pytest.mark.parametrize(
    "variant",
    [
        LossVariant("CKD", lam=0.3),
        LossVariant("ARD", lam=0.6),
        LossVariant("RSLAD", lam=0.8),
        LossVariant("RSLAD_LM", lam=0.5, alpha=0.25),
        LossVariant("AKD", alpha=0.6),
        LossVariant("ENSEMBLE_AKD", alpha=0.6),
    ],
    ids=lambda v: v.tag.value,
)
def test_student_gradients_match_finite_differences(variant, mlp_spec, moons):
    x, y = moons.inputs[:8], moons.labels[:8]
    params = init_params(mlp_spec, 1)
    members = [Model(mlp_spec, init_params(mlp_spec, s)) for s in (2, 3)]
    teacher = (stack_members(members, (0.7, 0.3)) if variant.requires_ensemble else members[0]).bind()
    x_adv = pgd(teacher, x, y, AttackConfig(epsilon=0.05, step_size=0.02, iterations=2, seed=1))

    student = BoundModel(mlp_spec, params, requires_grad=True)
    ad.backward(distillation_loss(variant, student, teacher, x, y, x_adv))
    grads = student.gradients()

    for name in params.names():

        def loss_at(w, name=name):
            perturbed = Params({**params.tensors, name: w.values})
            return distillation_loss(variant, BoundModel(mlp_spec, perturbed), teacher, x, y, x_adv)

        expected = ad.finite_diff_grad(loss_at, ad.Tensor(params[name])).values
        np.testing.assert_allclose(grads[name], expected, rtol=1e-4, atol=1e-7)
