from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Final, Sequence

import numpy as np
import numpy.typing as npt

from autodiff.rng import RngStream

Array = npt.NDArray[np.float64]
# Vector-Jacobian product: receives one gradient per output (None when the
# output did not reach the loss) and returns one gradient per input.
VJP = Callable[[list[Array | None]], list[Array | None]]


class ShapeError(ValueError):
    """Raised when a primitive receives operands with incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or Inf."""


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


class Tensor:
    """Dense float64 array taking part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data: Any, requires_grad: bool = False, name: str = "") -> None:
        array = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(array)):
            raise NonFiniteError(f"tensor {name or '<unnamed>'} holds non-finite values")
        self.data: Array = array
        self.requires_grad = requires_grad
        self.grad: Array | None = None
        self.node: Node | None = None
        self.name = name

    # -- introspection -----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> Array:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, name={self.name!r})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other: Tensor | float) -> Tensor:
        return apply_primitive("add", [self, as_tensor(other)])

    def __radd__(self, other: float) -> Tensor:
        return apply_primitive("add", [as_tensor(other), self])

    def __sub__(self, other: Tensor | float) -> Tensor:
        return apply_primitive("sub", [self, as_tensor(other)])

    def __rsub__(self, other: float) -> Tensor:
        return apply_primitive("sub", [as_tensor(other), self])

    def __mul__(self, other: Tensor | float) -> Tensor:
        return apply_primitive("mul", [self, as_tensor(other)])

    def __rmul__(self, other: float) -> Tensor:
        return apply_primitive("mul", [as_tensor(other), self])

    def __truediv__(self, other: float) -> Tensor:
        return apply_primitive("mul", [self, as_tensor(1.0 / float(other))])

    def __neg__(self) -> Tensor:
        return apply_primitive("mul", [self, as_tensor(-1.0)])

    def __matmul__(self, other: Tensor) -> Tensor:
        return apply_primitive("matmul", [self, other])

    def exp(self) -> Tensor:
        return apply_primitive("exp", [self])

    def arctan(self) -> Tensor:
        return apply_primitive("arctan", [self])

    def relu(self) -> Tensor:
        return apply_primitive("relu", [self])

    def leaky_relu(self, slope: float = 0.2) -> Tensor:
        return apply_primitive("leaky_relu", [self], slope=slope)

    def square(self) -> Tensor:
        return apply_primitive("square", [self])

    def sum(self, axis: int | tuple[int, ...] | None = None) -> Tensor:
        return apply_primitive("sum", [self], axis=axis)

    def mean(self, axis: int | tuple[int, ...] | None = None) -> Tensor:
        return apply_primitive("mean", [self], axis=axis)

    def reshape(self, shape: Sequence[int]) -> Tensor:
        return apply_primitive("reshape", [self], shape=tuple(shape))

    def take(self, indices: npt.NDArray[np.int64], axis: int) -> Tensor:
        return apply_primitive("take", [self], indices=indices, axis=axis)


def as_tensor(value: Tensor | float | Array) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


# ---------------------------------------------------------------------------
# Graph
# ---------------------------------------------------------------------------


@dataclass
class Node:
    op_id: str
    inputs: list[Tensor]
    outputs: list[Tensor]
    vjp: VJP


@dataclass
class Graph:
    """Define-by-run tape. Primitives applied inside ``with Graph():`` are recorded.

    Outside any active graph nothing is recorded, which is how inference runs.
    Nodes are appended in creation order, so the tape is topologically sorted.
    """

    nodes: list[Node] = field(default_factory=list)
    finalized: bool = False

    def __enter__(self) -> Graph:
        _graph_stack().append(self)
        return self

    def __exit__(self, *exc: object) -> None:
        stack = _graph_stack()
        if stack and stack[-1] is self:
            stack.pop()
        self.finalized = True

    def record(self, node: Node) -> None:
        if self.finalized:
            raise RuntimeError("cannot record into a finalized graph")
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


_LOCAL = threading.local()


def _graph_stack() -> list[Graph]:
    stack: list[Graph] | None = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def active_graph() -> Graph | None:
    stack = _graph_stack()
    return stack[-1] if stack else None


def backward(graph: Graph, loss: Tensor) -> None:
    """Accumulate d loss / d leaf into ``leaf.grad`` for every reachable leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None and not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")

    grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}

    def accumulate(tensor: Tensor, grad: Array) -> None:
        key = id(tensor)
        if key in grads:
            grads[key] = grads[key] + grad
        else:
            grads[key] = grad

    for node in reversed(graph.nodes):
        out_grads = [grads.get(id(out)) for out in node.outputs]
        if all(g is None for g in out_grads):
            continue
        in_grads = node.vjp(out_grads)
        for tensor, grad in zip(node.inputs, in_grads):
            if grad is None or not tensor.requires_grad:
                continue
            accumulate(tensor, grad)

    seen: set[int] = set()
    leaves = [loss] if loss.is_leaf else []
    for node in graph.nodes:
        leaves.extend(t for t in node.inputs if t.is_leaf)
    for leaf in leaves:
        key = id(leaf)
        if key in seen or not leaf.requires_grad or key not in grads:
            continue
        seen.add(key)
        leaf.grad = grads[key] if leaf.grad is None else leaf.grad + grads[key]


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

PrimitiveResult = tuple[list[Array], VJP]
Primitive = Callable[..., PrimitiveResult]


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op_id: str, a: Array, b: Array) -> tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(a.shape, b.shape))
    except ValueError as exc:
        raise ShapeError(f"{op_id}: cannot broadcast shapes {a.shape} and {b.shape}") from exc


def _add(a: Array, b: Array) -> PrimitiveResult:
    _broadcast_shape("add", a, b)

    def vjp(g: list[Array | None]) -> list[Array | None]:
        grad = g[0]
        if grad is None:
            return [None, None]
        return [_unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)]

    return [a + b], vjp


def _sub(a: Array, b: Array) -> PrimitiveResult:
    _broadcast_shape("sub", a, b)

    def vjp(g: list[Array | None]) -> list[Array | None]:
        grad = g[0]
        if grad is None:
            return [None, None]
        return [_unbroadcast(grad, a.shape), _unbroadcast(-grad, b.shape)]

    return [a - b], vjp


def _mul(a: Array, b: Array) -> PrimitiveResult:
    _broadcast_shape("mul", a, b)

    def vjp(g: list[Array | None]) -> list[Array | None]:
        grad = g[0]
        if grad is None:
            return [None, None]
        return [_unbroadcast(grad * b, a.shape), _unbroadcast(grad * a, b.shape)]

    return [a * b], vjp


def _matmul(a: Array, b: Array) -> PrimitiveResult:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def vjp(g: list[Array | None]) -> list[Array | None]:
        grad = g[0]
        if grad is None:
            return [None, None]
        return [grad @ b.T, a.T @ grad]

    return [a @ b], vjp


def _exp(x: Array) -> PrimitiveResult:
    out = np.exp(x)
    return [out], lambda g: [None if g[0] is None else g[0] * out]


def _arctan(x: Array) -> PrimitiveResult:
    return [np.arctan(x)], lambda g: [None if g[0] is None else g[0] / (1.0 + x * x)]


def _relu(x: Array) -> PrimitiveResult:
    mask = x > 0.0
    return [np.where(mask, x, 0.0)], lambda g: [None if g[0] is None else g[0] * mask]


def _leaky_relu(x: Array, slope: float) -> PrimitiveResult:
    factor = np.where(x > 0.0, 1.0, slope)
    return [x * factor], lambda g: [None if g[0] is None else g[0] * factor]


def _square(x: Array) -> PrimitiveResult:
    return [x * x], lambda g: [None if g[0] is None else 2.0 * x * g[0]]


def _normalize_axes(axis: int | tuple[int, ...] | None, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else axis
    return tuple(sorted(a % ndim if ndim else 0 for a in axes))


def _sum(x: Array, axis: int | tuple[int, ...] | None) -> PrimitiveResult:
    axes = _normalize_axes(axis, x.ndim)
    out = x.sum(axis=axes) if axes else x.copy()

    def vjp(g: list[Array | None]) -> list[Array | None]:
        grad = g[0]
        if grad is None:
            return [None]
        return [np.broadcast_to(np.expand_dims(grad, axes), x.shape).copy()]

    return [np.asarray(out, dtype=np.float64)], vjp


def _mean(x: Array, axis: int | tuple[int, ...] | None) -> PrimitiveResult:
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if count == 0:
        raise ShapeError(f"mean: reduction over empty axes of shape {x.shape}")
    outs, sum_vjp = _sum(x, axis)

    def vjp(g: list[Array | None]) -> list[Array | None]:
        grad = g[0]
        return sum_vjp([None if grad is None else grad / count])

    return [outs[0] / count], vjp


def _reshape(x: Array, shape: tuple[int, ...]) -> PrimitiveResult:
    try:
        out = x.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {shape}") from exc
    return [out], lambda g: [None if g[0] is None else g[0].reshape(x.shape)]


def _concat(*arrays: Array, axis: int) -> PrimitiveResult:
    shapes = [a.shape for a in arrays]
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat(axis={axis}): incompatible shapes {shapes}") from exc
    boundaries = np.cumsum([a.shape[axis] for a in arrays])[:-1]

    def vjp(g: list[Array | None]) -> list[Array | None]:
        grad = g[0]
        if grad is None:
            return [None] * len(arrays)
        return list(np.split(grad, boundaries, axis=axis))

    return [out], vjp


def _split(x: Array, sections: int | Sequence[int], axis: int) -> PrimitiveResult:
    length = x.shape[axis]
    if isinstance(sections, int):
        if sections <= 0 or length % sections:
            raise ShapeError(f"split(axis={axis}): cannot split length {length} into {sections} parts")
        sizes = [length // sections] * sections
    else:
        sizes = list(sections)
        if sum(sizes) != length or any(s <= 0 for s in sizes):
            raise ShapeError(f"split(axis={axis}): sizes {sizes} do not partition length {length} of {x.shape}")
    boundaries = np.cumsum(sizes)[:-1]
    outs = [part.copy() for part in np.split(x, boundaries, axis=axis)]

    def vjp(g: list[Array | None]) -> list[Array | None]:
        parts = [np.zeros_like(o) if grad is None else grad for o, grad in zip(outs, g)]
        return [np.concatenate(parts, axis=axis)]

    return outs, vjp


def _take(x: Array, indices: npt.NDArray[np.int64], axis: int) -> PrimitiveResult:
    if indices.ndim != 1 or (indices.size and (indices.min() < -x.shape[axis] or indices.max() >= x.shape[axis])):
        raise ShapeError(f"take(axis={axis}): indices out of range for shape {x.shape}")
    out = np.take(x, indices, axis=axis)

    def vjp(g: list[Array | None]) -> list[Array | None]:
        grad = g[0]
        if grad is None:
            return [None]
        result = np.zeros_like(x)
        moved = np.moveaxis(result, axis, 0)
        np.add.at(moved, indices, np.moveaxis(grad, axis, 0))
        return [result]

    return [out], vjp


def _dropout(x: Array, p: float, train: bool, rng: RngStream | None) -> PrimitiveResult:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return [x.copy()], lambda g: [g[0]]
    if rng is None:
        raise ValueError("dropout in train mode needs an RngStream")
    # inverted scaling: kept activations are divided by 1 - p
    mask = (rng.uniform(0.0, 1.0, x.shape) >= p) / (1.0 - p)
    return [x * mask], lambda g: [None if g[0] is None else g[0] * mask]


PRIMITIVES: Final[dict[str, Primitive]] = {
    "add": _add,
    "sub": _sub,
    "mul": _mul,
    "matmul": _matmul,
    "exp": _exp,
    "arctan": _arctan,
    "relu": _relu,
    "leaky_relu": _leaky_relu,
    "square": _square,
    "sum": _sum,
    "mean": _mean,
    "reshape": _reshape,
    "concat": _concat,
    "split": _split,
    "take": _take,
    "dropout": _dropout,
}


def apply_primitive_multi(op_id: str, inputs: Sequence[Tensor], **attrs: Any) -> list[Tensor]:
    """Run a primitive and record it on the active graph when any input needs grad."""
    primitive = PRIMITIVES.get(op_id)
    if primitive is None:
        raise KeyError(f"unknown primitive {op_id!r}")

    out_arrays, vjp = primitive(*(t.data for t in inputs), **attrs)
    for out in out_arrays:
        if not np.all(np.isfinite(out)):
            shapes = [t.shape for t in inputs]
            raise NonFiniteError(f"{op_id} produced non-finite values (input shapes {shapes})")

    graph = active_graph()
    track = graph is not None and any(t.requires_grad for t in inputs)
    outputs = []
    for out in out_arrays:
        tensor = Tensor.__new__(Tensor)
        tensor.data = np.asarray(out, dtype=np.float64)
        tensor.requires_grad = track
        tensor.grad = None
        tensor.node = None
        tensor.name = ""
        outputs.append(tensor)

    if track and graph is not None:
        node = Node(op_id=op_id, inputs=list(inputs), outputs=outputs, vjp=vjp)
        for tensor in outputs:
            tensor.node = node
        graph.record(node)
    return outputs


def apply_primitive(op_id: str, inputs: Sequence[Tensor], **attrs: Any) -> Tensor:
    outputs = apply_primitive_multi(op_id, inputs, **attrs)
    if len(outputs) != 1:
        raise ValueError(f"{op_id} returns {len(outputs)} outputs; use apply_primitive_multi")
    return outputs[0]


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    return apply_primitive("concat", list(tensors), axis=axis)


def split(tensor: Tensor, sections: int | Sequence[int], axis: int) -> list[Tensor]:
    return apply_primitive_multi("split", [tensor], sections=sections, axis=axis)


def dropout(tensor: Tensor, p: float, *, train: bool, rng: RngStream | None = None) -> Tensor:
    return apply_primitive("dropout", [tensor], p=p, train=train, rng=rng)
