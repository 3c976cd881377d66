"""Shared fixtures: tiny datasets, models and an experiment config that trains in seconds."""

from pathlib import Path

import numpy as np
import pytest

from akd_lab import autodiff as ad
from akd_lab.data import gen_two_moons
from akd_lab.models import Model, ModelSpec, init_params

TINY_CONFIG = """
name = "tiny"
output_dir = "out"

[dataset]
generator = "two_moons"
n_train = 48
n_test = 24
noise = 0.1
seed = 3

[model]
kind = "mlp"
layer_widths = [8, 2]

[teacher]
count = 1
epochs = 2
batch_size = 16

[teacher.schedule]
kind = "exponential"
base_lr = 0.1

[teacher.attack]
epsilon = 0.05
step_size = 0.02
iterations = 2

[student]
epochs = 2
batch_size = 16

[student.loss]
tag = "AKD"
alpha = 0.5

[student.schedule]
kind = "one_cycle"

[student.attack]
epsilon = 0.05
step_size = 0.02
iterations = 2

[[eval.attacks]]
name = "null"
epsilon = 0.0
step_size = 0.01
iterations = 1

[[eval.attacks]]
name = "pgd"
epsilon = 0.05
step_size = 0.02
iterations = 3
restarts = 2

[analysis]
smoothing_window = 5
extremes = 3

[analysis.attack]
epsilon = 0.05
step_size = 0.02
iterations = 2
"""


class FixedModel:
    """Probability model returning the same rows for any input batch."""

    def __init__(self, rows):
        self.rows = np.asarray(rows, dtype=np.float64)
        self.num_classes = self.rows.shape[1]

    def probs(self, x):
        n = x.shape[0]
        return ad.Tensor(np.resize(self.rows, (n, self.num_classes)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def mlp_spec():
    return ModelSpec("mlp", (2,), (8, 2), 2)


@pytest.fixture
def linear_spec():
    return ModelSpec("mlp", (2,), (2,), 2)


@pytest.fixture
def moons():
    return gen_two_moons(64, 0.1, seed=0)


@pytest.fixture
def model(mlp_spec):
    return Model(mlp_spec, init_params(mlp_spec, 0))


@pytest.fixture
def config_text():
    return TINY_CONFIG


@pytest.fixture
def write_config(tmp_path):
    def _write(text: str = TINY_CONFIG, name: str = "experiment.toml") -> Path:
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return path

    return _write
