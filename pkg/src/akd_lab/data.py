"""
Deterministic datasets for desk-scale experiments.

Generators place every input in [0, 1] so attack budgets are expressed in the
same units as pixel intensities. Image subsets are read from IDX files.
"""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ArtifactError, DomainError

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    name: str = ""
    seed: int = 0
    clamp_lo: float = 0.0
    clamp_hi: float = 1.0

    def __post_init__(self):
        inputs = np.array(self.inputs, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64)
        if inputs.shape[0] != labels.shape[0]:
            raise DomainError(f"{self.name}: {inputs.shape[0]} inputs but {labels.shape[0]} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DomainError(f"{self.name}: labels outside [0, {self.num_classes})")
        if inputs.size and (inputs.min() < self.clamp_lo or inputs.max() > self.clamp_hi):
            raise DomainError(f"{self.name}: inputs outside [{self.clamp_lo}, {self.clamp_hi}]")
        if self.split not in ("train", "test"):
            raise DomainError(f"{self.name}: unknown split '{self.split}'")
        inputs.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.inputs[idx], self.labels[idx], self.num_classes, self.split, self.name, self.seed,
            self.clamp_lo, self.clamp_hi,
        )


@dataclass(frozen=True)
class Batch:
    indices: np.ndarray
    inputs: np.ndarray
    labels: np.ndarray


def gen_gaussian_blobs(
    n: int, d: int, c: int, separation: float, seed: int, split: str = "train"
) -> Dataset:
    """
    ``c`` unit-variance Gaussian clusters with centers on a circle of radius
    ``separation`` (first two coordinates), rescaled by a fixed affine map into
    [0, 1]^d and clipped.
    """
    if c < 2 or d < 1 or n < c:
        raise DomainError("gen_gaussian_blobs: need c >= 2, d >= 1 and n >= c")
    if separation <= 0:
        raise DomainError("gen_gaussian_blobs: separation must be positive")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % c
    rng.shuffle(labels)
    centers = np.zeros((c, d))
    if d == 1:
        centers[:, 0] = np.linspace(-separation, separation, c)
    else:
        angles = 2.0 * np.pi * np.arange(c) / c
        centers[:, 0] = separation * np.cos(angles)
        centers[:, 1] = separation * np.sin(angles)
    points = centers[labels] + rng.standard_normal((n, d))
    half_width = separation + 4.0
    inputs = np.clip(0.5 + points / (2.0 * half_width), 0.0, 1.0)
    return Dataset(inputs, labels, c, split, "gaussian_blobs", seed)


def gen_two_moons(n: int, noise: float, seed: int, split: str = "train") -> Dataset:
    """Interleaved half circles; the unit arcs map to [0, 1] x [0.25, 0.75] before noise."""
    if noise < 0:
        raise DomainError("gen_two_moons: noise must be nonnegative")
    if n < 2:
        raise DomainError("gen_two_moons: need at least two samples")
    rng = np.random.default_rng(seed)
    n_outer = n // 2
    n_inner = n - n_outer
    t_outer = rng.uniform(0.0, np.pi, n_outer)
    t_inner = rng.uniform(0.0, np.pi, n_inner)
    outer = np.stack([np.cos(t_outer), np.sin(t_outer)], axis=1)
    inner = np.stack([1.0 - np.cos(t_inner), 0.5 - np.sin(t_inner)], axis=1)
    points = np.concatenate([outer, inner])
    labels = np.concatenate([np.zeros(n_outer, dtype=np.int64), np.ones(n_inner, dtype=np.int64)])
    if noise > 0:
        points = points + noise * rng.standard_normal(points.shape)
    order = rng.permutation(n)
    inputs = moons_to_unit_square(points[order])
    return Dataset(np.clip(inputs, 0.0, 1.0), labels[order], 2, split, "two_moons", seed)


def moons_to_unit_square(points: np.ndarray) -> np.ndarray:
    """Affine map taking the moons' bounding box [-1, 2] x [-0.5, 1] into the unit square."""
    return np.stack([(points[:, 0] + 1.0) / 3.0, (points[:, 1] + 0.5) / 3.0 + 0.25], axis=1)


def _read_idx(path: Path, expected_magic: int) -> np.ndarray:
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise ArtifactError(path, "IDX file not found") from None
    if len(raw) < 4:
        raise ArtifactError(path, "IDX header truncated")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise ArtifactError(path, f"bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise ArtifactError(path, "IDX dimensions truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    count = int(np.prod(dims))
    if len(raw) - header_end < count:
        raise ArtifactError(path, f"IDX payload truncated: expected {count} bytes, found {len(raw) - header_end}")
    return np.frombuffer(raw[header_end : header_end + count], dtype=np.uint8).reshape(dims)


def load_idx_images(
    images_path: Union[str, Path],
    labels_path: Union[str, Path],
    classes_filter: Optional[Sequence[int]] = None,
    split: str = "train",
) -> Dataset:
    """
    Read an IDX image/label pair as ``(n, 1, rows, cols)`` inputs scaled to [0, 1].

    ``classes_filter`` keeps only the listed classes and relabels them
    ``0..len(filter)-1`` in the given order.
    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC).astype(np.int64)
    if images.shape[0] != labels.shape[0]:
        raise ArtifactError(images_path, f"{images.shape[0]} images but {labels.shape[0]} labels in {labels_path}")

    inputs = images.astype(np.float64)[:, None, :, :] / 255.0
    num_classes = int(labels.max()) + 1 if labels.size else 0
    if classes_filter is not None:
        present = set(np.unique(labels).tolist())
        unknown = [c for c in classes_filter if c not in present]
        if unknown:
            raise DomainError(f"classes_filter names classes absent from {labels_path}: {unknown}")
        mask = np.isin(labels, classes_filter)
        remap = {c: i for i, c in enumerate(classes_filter)}
        inputs = inputs[mask]
        labels = np.array([remap[int(c)] for c in labels[mask]], dtype=np.int64)
        num_classes = len(classes_filter)
    logger.info(f"Loaded {len(labels)} images from {images_path}")
    return Dataset(inputs, labels, max(num_classes, 2), split, images_path.stem, 0)


def write_idx(
    images_path: Union[str, Path], labels_path: Union[str, Path], images: np.ndarray, labels: np.ndarray
) -> None:
    """Write uint8 images ``(n, rows, cols)`` and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    Path(images_path).write_bytes(
        struct.pack(">I", IDX_IMAGES_MAGIC) + struct.pack(">3I", *images.shape) + images.tobytes()
    )
    Path(labels_path).write_bytes(
        struct.pack(">I", IDX_LABELS_MAGIC) + struct.pack(">I", labels.shape[0]) + labels.tobytes()
    )


def batch_iter(dataset: Dataset, batch_size: int, seed: int, epoch: int) -> Iterator[Batch]:
    """Seeded permutation per (seed, epoch); the last partial batch is kept."""
    if batch_size < 1:
        raise DomainError("batch_size must be at least 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch]))
    order = rng.permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield Batch(idx, dataset.inputs[idx], dataset.labels[idx])


def class_counts(dataset: Dataset) -> List[int]:
    return np.bincount(dataset.labels, minlength=dataset.num_classes).tolist()


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic sub-seed for a named stream (and optional epoch/step keys)."""
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1)[0])
