"""
Reverse-mode automatic differentiation over dense float64 tensors.

Every differentiable operation is an :class:`Op` registered under a tag and
invoked through :func:`apply`. A tensor produced by an op records a
:class:`Node` (tag, parents, attrs) whenever one of its inputs requires a
gradient; :func:`backward` walks those nodes in reverse creation order.
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Union

import numpy as np

from .errors import DomainError, NumericError, ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]

LOG_FLOOR = 1e-12

# Creation order across all graphs; a node's parents always carry smaller ids.
_node_ids = itertools.count()


@dataclass(eq=False)
class Node:
    """Lineage record of a tensor produced by an op."""

    op: str
    parents: tuple
    attrs: Dict[str, Any]
    seq: int = field(default_factory=lambda: next(_node_ids))


class Tensor:
    """N-dimensional float64 array with a gradient slot and graph lineage."""

    __slots__ = ("values", "grad", "node", "requires_grad")

    def __init__(self, values: ArrayLike, requires_grad: bool = False, node: Optional[Node] = None):
        self.values = np.array(values, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.node = node
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return int(self.values.size)

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError("item", [self.shape], "tensor is not scalar")
        return float(self.values.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        return apply("add", [self, as_tensor(other)])

    def __sub__(self, other: "Tensor") -> "Tensor":
        return apply("add", [self, apply("negate", [as_tensor(other)])])

    def __mul__(self, other: "Tensor") -> "Tensor":
        return apply("mul", [self, as_tensor(other)])

    def __neg__(self) -> "Tensor":
        return apply("negate", [self])

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return apply("matmul", [self, as_tensor(other)])

    def __repr__(self) -> str:
        lineage = f", op={self.node.op}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{lineage})"


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    """Wrap arrays and scalars as constant tensors; pass tensors through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class Op:
    """A differentiable operation: forward on arrays, vector-Jacobian products back."""

    tag = ""

    def check(self, shapes: List[tuple], attrs: Dict[str, Any]) -> None:
        pass

    def forward(self, xs: List[np.ndarray], attrs: Dict[str, Any]) -> np.ndarray:
        raise NotImplementedError

    def backward(
        self, grad: np.ndarray, xs: List[np.ndarray], out: np.ndarray, attrs: Dict[str, Any]
    ) -> List[Optional[np.ndarray]]:
        raise NotImplementedError


_OPS: Dict[str, Op] = {}


def register(cls):
    """Class decorator adding an op to the catalog under its tag."""
    _OPS[cls.tag] = cls()
    return cls


def _leading_broadcast(op: str, a: tuple, b: tuple) -> bool:
    """Return True when ``b`` broadcasts over the leading batch dim of ``a``."""
    if a == b:
        return False
    if len(a) == len(b) + 1 and a[1:] == b:
        return True
    raise ShapeError(op, [a, b], "operands must match or broadcast over the leading batch dimension")


@register
class MatMul(Op):
    tag = "matmul"

    def check(self, shapes, attrs):
        a, b = shapes
        if len(a) != 2 or len(b) != 2 or a[1] != b[0]:
            raise ShapeError(self.tag, shapes)

    def forward(self, xs, attrs):
        return xs[0] @ xs[1]

    def backward(self, grad, xs, out, attrs):
        a, b = xs
        return [grad @ b.T, a.T @ grad]


@register
class Add(Op):
    tag = "add"

    def check(self, shapes, attrs):
        _leading_broadcast(self.tag, shapes[0], shapes[1])

    def forward(self, xs, attrs):
        return xs[0] + xs[1]

    def backward(self, grad, xs, out, attrs):
        gb = grad.sum(axis=0) if xs[0].shape != xs[1].shape else grad
        return [grad, gb]


@register
class Mul(Op):
    tag = "mul"

    def check(self, shapes, attrs):
        _leading_broadcast(self.tag, shapes[0], shapes[1])

    def forward(self, xs, attrs):
        return xs[0] * xs[1]

    def backward(self, grad, xs, out, attrs):
        a, b = xs
        gb = grad * a
        if a.shape != b.shape:
            gb = gb.sum(axis=0)
        return [grad * b, gb]


@register
class Relu(Op):
    tag = "relu"

    def forward(self, xs, attrs):
        return np.maximum(xs[0], 0.0)

    def backward(self, grad, xs, out, attrs):
        return [grad * (xs[0] > 0.0)]


@register
class Conv2d(Op):
    """Stride-1, valid-padding cross-correlation; optional per-channel bias."""

    tag = "conv2d"

    def check(self, shapes, attrs):
        x, w = shapes[0], shapes[1]
        if len(x) != 4 or len(w) != 4 or x[1] != w[1] or w[2] != w[3]:
            raise ShapeError(self.tag, shapes)
        if w[2] > x[2] or w[3] > x[3]:
            raise ShapeError(self.tag, shapes, "kernel larger than input")
        if len(shapes) == 3 and shapes[2] != (w[0],):
            raise ShapeError(self.tag, shapes, "bias must have one entry per output channel")

    def forward(self, xs, attrs):
        x, w = xs[0], xs[1]
        k = w.shape[2]
        windows = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
        out = np.einsum("ncijab,ocab->noij", windows, w, optimize=True)
        if len(xs) == 3:
            out = out + xs[2][None, :, None, None]
        return out

    def backward(self, grad, xs, out, attrs):
        x, w = xs[0], xs[1]
        k = w.shape[2]
        oh, ow = grad.shape[2], grad.shape[3]
        windows = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
        gw = np.einsum("noij,ncijab->ocab", grad, windows, optimize=True)
        gx = np.zeros_like(x)
        for a in range(k):
            for b in range(k):
                gx[:, :, a : a + oh, b : b + ow] += np.einsum("noij,oc->ncij", grad, w[:, :, a, b])
        grads = [gx, gw]
        if len(xs) == 3:
            grads.append(grad.sum(axis=(0, 2, 3)))
        return grads


@register
class LogSoftmax(Op):
    tag = "log_softmax"

    def forward(self, xs, attrs):
        z = xs[0]
        shifted = z - z.max(axis=-1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def backward(self, grad, xs, out, attrs):
        return [grad - np.exp(out) * grad.sum(axis=-1, keepdims=True)]


@register
class Softmax(Op):
    tag = "softmax"

    def forward(self, xs, attrs):
        z = xs[0]
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    def backward(self, grad, xs, out, attrs):
        return [out * (grad - (grad * out).sum(axis=-1, keepdims=True))]


class _Reduction(Op):
    def check(self, shapes, attrs):
        axis = attrs.get("axis")
        if axis is not None and not -len(shapes[0]) <= axis < len(shapes[0]):
            raise ShapeError(self.tag, shapes, f"axis {axis} out of range")

    def _count(self, shape, attrs) -> int:
        axis = attrs.get("axis")
        return int(np.prod(shape)) if axis is None else shape[axis]

    def _spread(self, grad, shape, attrs) -> np.ndarray:
        axis = attrs.get("axis")
        if axis is not None:
            grad = np.expand_dims(grad, axis)
        return np.broadcast_to(grad, shape).copy()


@register
class Sum(_Reduction):
    tag = "sum"

    def forward(self, xs, attrs):
        return np.asarray(xs[0].sum(axis=attrs.get("axis")))

    def backward(self, grad, xs, out, attrs):
        return [self._spread(grad, xs[0].shape, attrs)]


@register
class Mean(_Reduction):
    tag = "mean"

    def forward(self, xs, attrs):
        return np.asarray(xs[0].mean(axis=attrs.get("axis")))

    def backward(self, grad, xs, out, attrs):
        return [self._spread(grad, xs[0].shape, attrs) / self._count(xs[0].shape, attrs)]


@register
class Scale(Op):
    tag = "scale"

    def check(self, shapes, attrs):
        if "factor" not in attrs:
            raise DomainError("scale: missing attr 'factor'")

    def forward(self, xs, attrs):
        return xs[0] * attrs["factor"]

    def backward(self, grad, xs, out, attrs):
        return [grad * attrs["factor"]]


@register
class Negate(Op):
    tag = "negate"

    def forward(self, xs, attrs):
        return -xs[0]

    def backward(self, grad, xs, out, attrs):
        return [-grad]


@register
class Log(Op):
    """Natural log of ``x + floor``; without a floor every entry must be positive."""

    tag = "log"

    def forward(self, xs, attrs):
        shifted = xs[0] + attrs.get("floor", 0.0)
        if np.any(shifted <= 0.0):
            raise DomainError("log: non-positive input" + ("" if "floor" in attrs else " and no floor given"))
        return np.log(shifted)

    def backward(self, grad, xs, out, attrs):
        return [grad / (xs[0] + attrs.get("floor", 0.0))]


@register
class Clamp(Op):
    tag = "clamp"

    def check(self, shapes, attrs):
        if attrs.get("lo", -np.inf) >= attrs.get("hi", np.inf):
            raise DomainError("clamp: lo must be below hi")

    def forward(self, xs, attrs):
        return np.clip(xs[0], attrs.get("lo", -np.inf), attrs.get("hi", np.inf))

    def backward(self, grad, xs, out, attrs):
        x = xs[0]
        inside = (x >= attrs.get("lo", -np.inf)) & (x <= attrs.get("hi", np.inf))
        return [grad * inside]


@register
class Reshape(Op):
    tag = "reshape"

    def check(self, shapes, attrs):
        target = tuple(attrs["shape"])
        known = [d for d in target if d != -1]
        total = int(np.prod(shapes[0]))
        if target.count(-1) > 1 or (known and total % int(np.prod(known))) or (
            -1 not in target and int(np.prod(target)) != total
        ):
            raise ShapeError(self.tag, [shapes[0], target])

    def forward(self, xs, attrs):
        return xs[0].reshape(attrs["shape"])

    def backward(self, grad, xs, out, attrs):
        return [grad.reshape(xs[0].shape)]


def apply(op_tag: str, inputs: Sequence[Tensor], attrs: Optional[Dict[str, Any]] = None) -> Tensor:
    """Run a registered op forward and record lineage when a gradient is needed."""
    try:
        op = _OPS[op_tag]
    except KeyError:
        raise DomainError(f"unknown op '{op_tag}'") from None
    attrs = dict(attrs or {})
    inputs = [as_tensor(t) for t in inputs]
    op.check([t.shape for t in inputs], attrs)

    with np.errstate(all="ignore"):
        values = op.forward([t.values for t in inputs], attrs)
    if not np.all(np.isfinite(values)):
        raise NumericError(f"{op_tag} produced non-finite values")

    requires_grad = any(t.requires_grad for t in inputs)
    node = Node(op_tag, tuple(inputs), attrs) if requires_grad else None
    return Tensor(values, requires_grad=requires_grad, node=node)


class ComputeGraph:
    """Ancestors of an output in creation order; parents precede children."""

    def __init__(self, output: Tensor):
        seen = {id(output)}
        stack = [output]
        interior: List[Tensor] = []
        while stack:
            tensor = stack.pop()
            if tensor.node is None:
                continue
            interior.append(tensor)
            for parent in tensor.node.parents:
                if id(parent) not in seen:
                    seen.add(id(parent))
                    stack.append(parent)
        interior.sort(key=lambda t: t.node.seq)
        for tensor in interior:
            for parent in tensor.node.parents:
                assert parent.node is None or parent.node.seq < tensor.node.seq, "graph cycle"
        self.nodes = interior

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.nodes)


def backward(output: Tensor) -> None:
    """Accumulate d(output)/d(p) into ``p.grad`` for every ancestor requiring grad."""
    if output.size != 1:
        raise ShapeError("backward", [output.shape], "output must be scalar")
    if output.node is None:
        raise DomainError("backward: output has no lineage (no input requires grad)")

    graph = ComputeGraph(output)
    pending: Dict[int, np.ndarray] = {id(output): np.ones_like(output.values)}
    for tensor in reversed(graph.nodes):
        grad = pending.pop(id(tensor), None)
        if grad is None:
            continue
        _accumulate(tensor, grad)
        node = tensor.node
        with np.errstate(all="ignore"):
            parent_grads = _OPS[node.op].backward(grad, [p.values for p in node.parents], tensor.values, node.attrs)
        for parent, parent_grad in zip(node.parents, parent_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            if not np.all(np.isfinite(parent_grad)):
                raise NumericError(f"backward through {node.op} produced non-finite gradients")
            if parent.node is None:
                _accumulate(parent, parent_grad)
            elif id(parent) in pending:
                pending[id(parent)] = pending[id(parent)] + parent_grad
            else:
                pending[id(parent)] = parent_grad
    logger.debug(f"backward through {len(graph)} nodes")


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    grad = np.asarray(grad, dtype=np.float64).reshape(tensor.shape)
    tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad


def finite_diff_grad(f: Callable[[Tensor], Union[Tensor, float]], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference estimate of the gradient of scalar ``f`` at ``x``."""
    if h <= 0:
        raise DomainError("finite_diff_grad: h must be positive")

    def evaluate(values: np.ndarray) -> float:
        result = f(Tensor(values))
        return result.item() if isinstance(result, Tensor) else float(result)

    base = x.values.reshape(-1)
    grad = np.zeros_like(base)
    for i in range(base.size):
        plus, minus = base.copy(), base.copy()
        plus[i] += h
        minus[i] -= h
        grad[i] = (evaluate(plus.reshape(x.shape)) - evaluate(minus.reshape(x.shape))) / (2.0 * h)
    return Tensor(grad.reshape(x.shape))


# Functional spellings of the catalog.


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply("matmul", [a, b])


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply("add", [a, b])


def mul(a: Tensor, b: Tensor) -> Tensor:
    return apply("mul", [a, b])


def relu(x: Tensor) -> Tensor:
    return apply("relu", [x])


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    return apply("conv2d", [x, weight] + ([bias] if bias is not None else []))


def log_softmax(x: Tensor) -> Tensor:
    return apply("log_softmax", [x])


def softmax(x: Tensor) -> Tensor:
    return apply("softmax", [x])


def sum(x: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    return apply("sum", [x], {"axis": axis})


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    return apply("mean", [x], {"axis": axis})


def scale(x: Tensor, factor: float) -> Tensor:
    return apply("scale", [x], {"factor": float(factor)})


def negate(x: Tensor) -> Tensor:
    return apply("negate", [x])


def log(x: Tensor, floor: Optional[float] = None) -> Tensor:
    return apply("log", [x], {} if floor is None else {"floor": floor})


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    return apply("clamp", [x], {"lo": lo, "hi": hi})


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return apply("reshape", [x], {"shape": tuple(shape)})
