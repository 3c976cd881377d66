"""
Desk-scale classifiers: architecture specs, parameter sets, bound (graph-building)
views for training and attacks, and β-mixed teacher ensembles.
"""

import hashlib
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Mapping, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DomainError, ShapeError


class ModelKind(str, Enum):
    MLP = "mlp"
    TINY_CONV = "tiny_conv"


@dataclass(frozen=True)
class ModelSpec:
    """
    Declarative architecture.

    ``mlp``: ``input_shape == (d,)`` and ``layer_widths`` lists every dense
    layer width, the last one being ``num_classes``.
    ``tiny_conv``: ``input_shape == (channels, height, width)`` and
    ``layer_widths == (conv_channels, kernel, hidden)``.
    """

    kind: ModelKind
    input_shape: Tuple[int, ...]
    layer_widths: Tuple[int, ...]
    num_classes: int

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", ModelKind(self.kind))
        except ValueError:
            raise ConfigError("model.kind", f"unknown model kind '{self.kind}'") from None
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if self.num_classes < 2:
            raise ConfigError("model.num_classes", "must be at least 2")
        if not self.layer_widths or any(w <= 0 for w in self.layer_widths):
            raise ConfigError("model.layer_widths", "widths must be positive")
        if any(d <= 0 for d in self.input_shape):
            raise ConfigError("model.input_shape", "dimensions must be positive")
        if self.kind is ModelKind.MLP:
            if len(self.input_shape) != 1:
                raise ConfigError("model.input_shape", "mlp expects a flat (d,) input")
            if self.layer_widths[-1] != self.num_classes:
                raise ConfigError("model.layer_widths", "last layer width must equal num_classes")
        else:
            if len(self.input_shape) != 3:
                raise ConfigError("model.input_shape", "tiny_conv expects (channels, height, width)")
            if len(self.layer_widths) != 3:
                raise ConfigError("model.layer_widths", "tiny_conv expects (channels, kernel, hidden)")
            kernel = self.layer_widths[1]
            if kernel > min(self.input_shape[1:]):
                raise ConfigError("model.layer_widths", "kernel larger than the input image")

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        """Ordered parameter names and shapes."""
        shapes: Dict[str, Tuple[int, ...]] = {}
        if self.kind is ModelKind.MLP:
            dims = [self.input_shape[0], *self.layer_widths]
            for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
                shapes[f"dense{i}.weight"] = (fan_in, fan_out)
                shapes[f"dense{i}.bias"] = (fan_out,)
            return shapes

        channels, kernel, hidden = self.layer_widths
        in_channels, height, width = self.input_shape
        flat = channels * (height - kernel + 1) * (width - kernel + 1)
        shapes["conv.weight"] = (channels, in_channels, kernel, kernel)
        shapes["conv.bias"] = (channels,)
        shapes["dense0.weight"] = (flat, hidden)
        shapes["dense0.bias"] = (hidden,)
        shapes["dense1.weight"] = (hidden, self.num_classes)
        shapes["dense1.bias"] = (self.num_classes,)
        return shapes

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind.value,
            "input_shape": list(self.input_shape),
            "layer_widths": list(self.layer_widths),
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ModelSpec":
        return cls(
            kind=ModelKind(data["kind"]),
            input_shape=tuple(data["input_shape"]),
            layer_widths=tuple(data["layer_widths"]),
            num_classes=int(data["num_classes"]),
        )


@dataclass(frozen=True, eq=False)
class Params:
    """Named parameter arrays, read-only once constructed."""

    tensors: Mapping[str, np.ndarray]
    seed: int = 0

    def __post_init__(self):
        frozen = {}
        for name, array in self.tensors.items():
            array = np.array(array, dtype=np.float64)
            if not np.all(np.isfinite(array)):
                raise DomainError(f"parameter '{name}' contains non-finite values")
            array.setflags(write=False)
            frozen[name] = array
        object.__setattr__(self, "tensors", frozen)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> List[str]:
        return list(self.tensors)

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name, array in self.tensors.items():
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(array, dtype="<f8").tobytes())
        return digest.hexdigest()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Params):
            return NotImplemented
        return (
            self.seed == other.seed
            and list(self.tensors) == list(other.tensors)
            and all(np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors)
        )

    def check_against(self, spec: ModelSpec) -> None:
        expected = spec.param_shapes()
        actual = {name: array.shape for name, array in self.tensors.items()}
        if expected != actual:
            raise ShapeError("params", list(actual.values()), f"parameters do not match {spec.kind.value} spec")


def init_params(spec: ModelSpec, seed: int) -> Params:
    """Scaled-uniform fan-in weights (bound sqrt(6 / fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]
        bound = math.sqrt(6.0 / fan_in)
        tensors[name] = rng.uniform(-bound, bound, size=shape)
    return Params(tensors, seed=seed)


class ProbabilityModel(Protocol):
    """Anything mapping an input tensor to a differentiable probability tensor."""

    num_classes: int

    def probs(self, x: Tensor) -> Tensor:
        ...


class BoundModel:
    """Parameters bound as graph leaves; ``requires_grad`` makes them trainable."""

    def __init__(self, spec: ModelSpec, params: Params, requires_grad: bool = False):
        params.check_against(spec)
        self.spec = spec
        self.params = params
        self.num_classes = spec.num_classes
        self.leaves = {name: Tensor(array, requires_grad=requires_grad) for name, array in params.tensors.items()}

    def logits(self, x: Tensor) -> Tensor:
        x = ad.as_tensor(x)
        if tuple(x.shape[1:]) != self.spec.input_shape:
            raise ShapeError("forward", [x.shape, self.spec.input_shape], "input does not match model spec")
        leaves = self.leaves
        if self.spec.kind is ModelKind.TINY_CONV:
            h = ad.relu(ad.conv2d(x, leaves["conv.weight"], leaves["conv.bias"]))
            x = ad.reshape(h, (x.shape[0], -1))
        layers = sum(1 for name in leaves if name.startswith("dense") and name.endswith(".weight"))
        h = x
        for i in range(layers):
            h = ad.add(ad.matmul(h, leaves[f"dense{i}.weight"]), leaves[f"dense{i}.bias"])
            if i < layers - 1:
                h = ad.relu(h)
        return h

    def probs(self, x: Tensor) -> Tensor:
        return ad.softmax(self.logits(x))

    def gradients(self) -> Dict[str, Optional[np.ndarray]]:
        return {name: leaf.grad for name, leaf in self.leaves.items()}


@dataclass(frozen=True, eq=False)
class Model:
    """A parameter set paired with its architecture."""

    spec: ModelSpec
    params: Params

    def bind(self, requires_grad: bool = False) -> BoundModel:
        return BoundModel(self.spec, self.params, requires_grad=requires_grad)


def predict_probs(params: Params, spec: ModelSpec, x: Union[Tensor, np.ndarray]) -> Tensor:
    """Softmax outputs of a frozen model; no lineage is recorded."""
    return BoundModel(spec, params).probs(ad.as_tensor(np.asarray(getattr(x, "values", x))))


@dataclass(frozen=True, eq=False)
class EnsembleTeacher:
    """M teachers mixed with convex weights β (validated strictly, never renormalized)."""

    members: Tuple[Tuple[Params, ModelSpec], ...]
    beta: Tuple[float, ...] = field(default=())

    def __post_init__(self):
        members = tuple((params, spec) for params, spec in self.members)
        if not members:
            raise DomainError("ensemble has no members")
        beta = tuple(float(b) for b in self.beta) if self.beta else tuple(1.0 / len(members) for _ in members)
        if len(beta) != len(members):
            raise DomainError(f"ensemble has {len(members)} members but {len(beta)} beta weights")
        if any(b < 0 for b in beta):
            raise DomainError("ensemble beta weights must be nonnegative")
        if abs(math.fsum(beta) - 1.0) > 1e-9:
            raise DomainError(f"ensemble beta weights sum to {math.fsum(beta)!r}, expected 1")
        classes = {spec.num_classes for _, spec in members}
        if len(classes) != 1:
            raise DomainError("ensemble members disagree on num_classes")
        object.__setattr__(self, "members", members)
        object.__setattr__(self, "beta", beta)

    @property
    def num_classes(self) -> int:
        return self.members[0][1].num_classes

    def bind(self, requires_grad: bool = False) -> "BoundEnsemble":
        return BoundEnsemble(self)


class BoundEnsemble:
    """Differentiable (w.r.t. the input) view of Σ β_i f_{T_i}(x)."""

    def __init__(self, ensemble: EnsembleTeacher):
        self.ensemble = ensemble
        self.num_classes = ensemble.num_classes
        self.bound = [BoundModel(spec, params) for params, spec in ensemble.members]

    def probs(self, x: Tensor) -> Tensor:
        mixed = None
        for beta, member in zip(self.ensemble.beta, self.bound):
            term = ad.scale(member.probs(x), beta)
            mixed = term if mixed is None else ad.add(mixed, term)
        return mixed


def ensemble_probs(ens: EnsembleTeacher, x: Union[Tensor, np.ndarray]) -> Tensor:
    return ens.bind().probs(ad.as_tensor(np.asarray(getattr(x, "values", x))))


Teacher = Union[Model, EnsembleTeacher]


def bind_teacher(teacher: Teacher) -> ProbabilityModel:
    """Frozen view of a single teacher or an ensemble."""
    return teacher.bind(requires_grad=False)


def stack_members(models: Sequence[Model], beta: Optional[Sequence[float]] = None) -> EnsembleTeacher:
    return EnsembleTeacher(tuple((m.params, m.spec) for m in models), tuple(beta or ()))
