import struct

import numpy as np
import pytest

from akd_lab.data import (
    IDX_IMAGES_MAGIC,
    Dataset,
    batch_iter,
    class_counts,
    derive_seed,
    gen_gaussian_blobs,
    gen_two_moons,
    load_idx_images,
    write_idx,
)
from akd_lab.errors import ArtifactError, DomainError
from akd_lab.models import ModelSpec
from akd_lab.training import Schedule, TrainConfig, evaluate, train


def test_blobs_are_deterministic():
    a = gen_gaussian_blobs(100, 3, 4, 3.0, seed=1)
    b = gen_gaussian_blobs(100, 3, 4, 3.0, seed=1)
    assert a.inputs.tobytes() == b.inputs.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()
    assert gen_gaussian_blobs(100, 3, 4, 3.0, seed=2).inputs.tobytes() != a.inputs.tobytes()


def test_blobs_are_balanced_and_bounded():
    data = gen_gaussian_blobs(103, 2, 4, 2.0, seed=0)
    counts = class_counts(data)
    assert max(counts) - min(counts) <= 1
    assert data.inputs.min() >= 0.0 and data.inputs.max() <= 1.0
    assert data.input_shape == (2,)


@pytest.mark.parametrize("args", [(3, 2, 4, 1.0), (10, 2, 1, 1.0), (10, 2, 2, 0.0)])
def test_blobs_reject_invalid_args(args):
    with pytest.raises(DomainError):
        gen_gaussian_blobs(*args, seed=0)


def test_noiseless_moons_lie_on_arcs():
    data = gen_two_moons(200, 0.0, seed=4)
    x = data.inputs[:, 0] * 3.0 - 1.0
    y = (data.inputs[:, 1] - 0.25) * 3.0 - 0.5
    outer, inner = data.labels == 0, data.labels == 1
    np.testing.assert_allclose(x[outer] ** 2 + y[outer] ** 2, 1.0, atol=1e-9)
    np.testing.assert_allclose((x[inner] - 1.0) ** 2 + (y[inner] - 0.5) ** 2, 1.0, atol=1e-9)


def test_moons_balanced_and_deterministic():
    a = gen_two_moons(101, 0.2, seed=9)
    assert abs(int(a.labels.sum()) * 2 - len(a)) <= 1
    assert a.inputs.tobytes() == gen_two_moons(101, 0.2, seed=9).inputs.tobytes()
    assert a.inputs.min() >= 0.0 and a.inputs.max() <= 1.0


def test_moons_reject_negative_noise():
    with pytest.raises(DomainError):
        gen_two_moons(10, -0.1, seed=0)


def test_dataset_validation():
    with pytest.raises(DomainError):
        Dataset(np.zeros((2, 2)), [0, 2], num_classes=2)
    with pytest.raises(DomainError):
        Dataset(np.full((2, 2), 1.5), [0, 1], num_classes=2)
    with pytest.raises(DomainError):
        Dataset(np.zeros((3, 2)), [0, 1], num_classes=2)


def _idx_fixture(tmp_path, n=12):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(n, 4, 5), dtype=np.uint8)
    images[0, 0, 0], images[0, 0, 1] = 255, 0
    labels = np.arange(n) % 10
    images_path, labels_path = tmp_path / "images.idx", tmp_path / "labels.idx"
    write_idx(images_path, labels_path, images, labels)
    return images_path, labels_path, images, labels


def test_idx_roundtrip_counts_and_scaling(tmp_path):
    images_path, labels_path, images, labels = _idx_fixture(tmp_path)
    data = load_idx_images(images_path, labels_path)
    assert len(data) == len(labels)
    assert data.input_shape == (1, 4, 5)
    assert data.inputs[0, 0, 0, 0] == 1.0
    assert data.inputs[0, 0, 0, 1] == 0.0
    np.testing.assert_array_equal(data.labels, labels)


def test_idx_class_filter_remaps_in_given_order(tmp_path):
    images_path, labels_path, _, labels = _idx_fixture(tmp_path)
    data = load_idx_images(images_path, labels_path, classes_filter=[3, 1])
    assert data.num_classes == 2
    assert len(data) == int(np.isin(labels, [3, 1]).sum())
    expected = [0 if c == 3 else 1 for c in labels if c in (3, 1)]
    assert data.labels.tolist() == expected


def test_idx_unknown_class(tmp_path):
    images_path, labels_path, _, _ = _idx_fixture(tmp_path)
    with pytest.raises(DomainError):
        load_idx_images(images_path, labels_path, classes_filter=[0, 42])


def test_idx_bad_magic(tmp_path):
    images_path, labels_path, _, _ = _idx_fixture(tmp_path)
    raw = images_path.read_bytes()
    images_path.write_bytes(struct.pack(">I", 0x00000802) + raw[4:])
    with pytest.raises(ArtifactError, match="magic"):
        load_idx_images(images_path, labels_path)


def test_idx_truncated_payload(tmp_path):
    images_path, labels_path, _, _ = _idx_fixture(tmp_path)
    raw = images_path.read_bytes()
    assert struct.unpack(">I", raw[:4])[0] == IDX_IMAGES_MAGIC
    images_path.write_bytes(raw[:-7])
    with pytest.raises(ArtifactError, match="truncated"):
        load_idx_images(images_path, labels_path)


def test_idx_missing_file(tmp_path):
    with pytest.raises(ArtifactError):
        load_idx_images(tmp_path / "a.idx", tmp_path / "b.idx")


def test_batches_cover_dataset(moons):
    batches = list(batch_iter(moons, 10, seed=1, epoch=0))
    assert [len(b.labels) for b in batches] == [10] * 6 + [4]
    seen = np.concatenate([b.indices for b in batches])
    assert sorted(seen.tolist()) == list(range(len(moons)))
    for b in batches:
        np.testing.assert_array_equal(b.inputs, moons.inputs[b.indices])


def test_single_batch_is_permuted(moons):
    (batch,) = batch_iter(moons, 1000, seed=1, epoch=0)
    assert sorted(batch.indices.tolist()) == list(range(len(moons)))
    assert batch.indices.tolist() != list(range(len(moons)))


def test_batch_order_depends_on_seed_and_epoch(moons):
    def order(seed, epoch):
        return np.concatenate([b.indices for b in batch_iter(moons, 16, seed, epoch)]).tolist()

    assert order(3, 0) == order(3, 0)
    assert order(3, 0) != order(3, 1)


def test_batch_size_must_be_positive(moons):
    with pytest.raises(DomainError):
        list(batch_iter(moons, 0, seed=0, epoch=0))


def test_derive_seed_is_stable():
    assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)
    assert derive_seed(1, 2, 3) != derive_seed(1, 3, 2)


@pytest.mark.parametrize("c", [2, 3])
def test_well_separated_blobs_are_linearly_separable(c):
    data = gen_gaussian_blobs(120, 2, c, 20.0, seed=4)
    spec = ModelSpec("mlp", (2,), (c,), c)
    cfg = TrainConfig(epochs=100, batch_size=32, seed=0, schedule=Schedule("constant", base_lr=0.5))
    clean, _ = evaluate(train(spec, data, cfg).params, spec, data)
    assert clean == 1.0
