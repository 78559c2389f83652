"""Tape-based reverse-mode automatic differentiation over float64 arrays."""

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from enum import Enum
from typing import (
    Any,
    Callable,
    Dict,
    Iterator,
    List,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np

from .errors import ContractError, NumericError, ShapeError

ArrayLike = Union[np.ndarray, float, int, Sequence[Any]]
Operand = Union["Tensor", np.ndarray, float, int]
VJP = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]
IndexKey = Any
Axes = Optional[Union[int, Tuple[int, ...]]]

DEFAULT_LEAKY_SLOPE = 0.2

_node_ids = itertools.count(1)


class OpKind(str, Enum):
    """Kinds of differentiable operations the tape can record."""
    MATMUL = "matmul"
    ADD = "add"
    SUBTRACT = "subtract"
    MULTIPLY = "multiply"
    DIVIDE = "divide"
    NEGATE = "negate"
    SUM = "sum"
    MEAN = "mean"
    SIGMOID = "sigmoid"
    LEAKY_RELU = "leaky_relu"
    LOG = "log"
    EXP = "exp"
    SQUARE = "square"
    CONCAT = "concat"
    SLICE = "slice"
    BROADCAST = "broadcast"
    RESHAPE = "reshape"
    TRANSPOSE = "transpose"
    SOFTMAX = "softmax"
    LOGSUMEXP = "logsumexp"
    CLAMP = "clamp"
    GRADIENT_REVERSAL = "gradient_reversal"


class Tensor:
    """Dense float64 array that can participate in a differentiation graph."""

    __array_priority__ = 1000

    def __init__(self, data: ArrayLike, requires_grad: bool = False, copy: bool = True):
        """
        Create a tensor.

        Args:
            data: Values (copied unless copy=False)
            requires_grad: Whether gradients should be accumulated into .grad
            copy: Copy the input buffer

        Raises:
            NumericError: If any value is non-finite
        """
        array = np.array(data, dtype=np.float64, copy=True) if copy else np.asarray(
            data, dtype=np.float64
        )
        _check_finite(array, "tensor construction")
        self.data: np.ndarray = np.require(array, requirements="C")
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node_id = next(_node_ids)
        self._tape: Optional["Tape"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        """Return the value of a single-element tensor."""
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        """Constant copy of this tensor, cut from the graph."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other: Operand) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Operand) -> "Tensor":
        return subtract(self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        return subtract(other, self)

    def __mul__(self, other: Operand) -> "Tensor":
        return multiply(self, other)

    def __rmul__(self, other: Operand) -> "Tensor":
        return multiply(other, self)

    def __truediv__(self, other: Operand) -> "Tensor":
        return divide(self, other)

    def __rtruediv__(self, other: Operand) -> "Tensor":
        return divide(other, self)

    def __neg__(self) -> "Tensor":
        return negate(self)

    def __matmul__(self, other: Operand) -> "Tensor":
        return matmul(self, other)

    def __rmatmul__(self, other: Operand) -> "Tensor":
        return matmul(other, self)

    def __getitem__(self, key: IndexKey) -> "Tensor":
        return slice_(self, key)

    def sum(self, axis: Axes = None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Axes = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes: int) -> "Tensor":
        return transpose(self, axes if axes else None)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class Parameter(Tensor):
    """Trainable leaf tensor."""

    def __init__(self, data: ArrayLike):
        super().__init__(data, requires_grad=True)


@dataclass
class TapeEntry:
    """One recorded operation."""
    kind: OpKind
    input_ids: Tuple[int, ...]
    output_id: int
    inputs: Tuple[Tensor, ...]
    output: Tensor
    vjp: VJP


class Tape:
    """
    Ordered record of operations for reverse-mode differentiation.

    Entries are appended in execution order, so every input precedes its consumer.
    Used as a context manager, a tape becomes the active tape of the current thread.
    """

    def __init__(self) -> None:
        self.entries: List[TapeEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    def __enter__(self) -> "Tape":
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc: Any) -> None:
        if _state.tapes and _state.tapes[-1] is self:
            _state.tapes.pop()

    def record(self, entry: TapeEntry) -> None:
        for tensor in entry.inputs:
            if tensor._tape is not None and tensor._tape is not self:
                raise ContractError(
                    f"{entry.kind.value}: input {tensor.node_id} was recorded on another tape"
                )
        self.entries.append(entry)

    def clear(self) -> None:
        """Drop every entry; tensors produced here become constants."""
        for entry in self.entries:
            entry.output._tape = None
            entry.output.requires_grad = False
        self.entries = []

    def backward(self, loss: Tensor, retain_graph: bool = False) -> None:
        """
        Accumulate dLoss/dLeaf into the .grad of every reachable leaf.

        Args:
            loss: Scalar tensor recorded on this tape
            retain_graph: Keep the entries after the pass

        Raises:
            ContractError: If loss is not scalar or not recorded here
            NumericError: If a gradient becomes non-finite
        """
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.entries or loss._tape is not self:
            raise ContractError("loss was not recorded on this tape")

        grads: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for entry in reversed(self.entries):
            upstream = grads.pop(entry.output_id, None)
            if upstream is None:
                continue
            input_grads = entry.vjp(upstream)
            for tensor, grad in zip(entry.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                if grad.shape != tensor.data.shape:
                    grad = _unbroadcast(grad, tensor.data.shape)
                _check_finite(grad, f"{entry.kind.value} backward")
                if tensor._tape is self:
                    previous = grads.get(tensor.node_id)
                    grads[tensor.node_id] = grad if previous is None else previous + grad
                elif tensor.grad is None:
                    tensor.grad = np.array(grad, dtype=np.float64)
                else:
                    tensor.grad = tensor.grad + grad

        if not retain_graph:
            self.clear()


class _GradState(threading.local):
    def __init__(self) -> None:
        self.enabled = True
        self.tapes: List[Tape] = [Tape()]


_state = _GradState()


def active_tape() -> Tape:
    """Tape that receives operations on the current thread."""
    return _state.tapes[-1]


def is_grad_enabled() -> bool:
    return _state.enabled


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording on the current thread."""
    previous = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """
    Run reverse-mode differentiation from a scalar loss.

    Args:
        loss: Scalar tensor
        retain_graph: Keep the tape entries after the pass
    """
    if loss._tape is None:
        raise ContractError("loss is not part of a recorded graph")
    loss._tape.backward(loss, retain_graph=retain_graph)


def _check_finite(array: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(array)):
        raise NumericError(f"non-finite value in {where}")


def _as_tensor(value: Operand) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=False, copy=False)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(kind: OpKind, *shapes: Tuple[int, ...]) -> Tuple[int, ...]:
    try:
        out = tuple(np.broadcast_shapes(*shapes))
    except ValueError:
        raise ShapeError(f"{kind.value}: shapes {list(shapes)} are not broadcastable") from None
    # one operand must already have the result shape; the others expand into it
    if out not in [tuple(s) for s in shapes]:
        raise ShapeError(f"{kind.value}: shapes {list(shapes)} would both need expanding")
    return out


def _emit(kind: OpKind, inputs: Tuple[Tensor, ...], out: np.ndarray, vjp: VJP) -> Tensor:
    _check_finite(out, kind.value)
    tracked = _state.enabled and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=tracked, copy=False)
    if tracked:
        tape = active_tape()
        tape.record(
            TapeEntry(
                kind=kind,
                input_ids=tuple(t.node_id for t in inputs),
                output_id=result.node_id,
                inputs=inputs,
                output=result,
                vjp=vjp,
            )
        )
        result._tape = tape
    return result


def _normalize_axes(axis: Axes, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(sorted(a % ndim for a in axes))


def _is_basic_index(key: IndexKey) -> bool:
    items = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, slice, type(Ellipsis), type(None))) for k in items)


# --- elementwise arithmetic -------------------------------------------------


def add(a: Operand, b: Operand) -> Tensor:
    ta, tb = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(OpKind.ADD, ta.shape, tb.shape)
    return _emit(OpKind.ADD, (ta, tb), ta.data + tb.data, lambda g: (g, g))


def subtract(a: Operand, b: Operand) -> Tensor:
    ta, tb = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(OpKind.SUBTRACT, ta.shape, tb.shape)
    return _emit(OpKind.SUBTRACT, (ta, tb), ta.data - tb.data, lambda g: (g, -g))


def multiply(a: Operand, b: Operand) -> Tensor:
    ta, tb = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(OpKind.MULTIPLY, ta.shape, tb.shape)
    x, y = ta.data, tb.data
    return _emit(OpKind.MULTIPLY, (ta, tb), x * y, lambda g: (g * y, g * x))


def divide(a: Operand, b: Operand) -> Tensor:
    ta, tb = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(OpKind.DIVIDE, ta.shape, tb.shape)
    x, y = ta.data, tb.data
    if np.any(y == 0):
        raise NumericError("divide: division by zero")
    return _emit(OpKind.DIVIDE, (ta, tb), x / y, lambda g: (g / y, -g * x / (y * y)))


def negate(a: Operand) -> Tensor:
    ta = _as_tensor(a)
    return _emit(OpKind.NEGATE, (ta,), -ta.data, lambda g: (-g,))


def square(a: Operand) -> Tensor:
    ta = _as_tensor(a)
    x = ta.data
    return _emit(OpKind.SQUARE, (ta,), x * x, lambda g: (2.0 * x * g,))


# --- linear algebra ---------------------------------------------------------


def matmul(a: Operand, b: Operand) -> Tensor:
    """
    Matrix product with numpy semantics (1-D operands promoted, leading dims broadcast).

    Raises:
        ShapeError: If inner dimensions differ or both operands are vectors
    """
    ta, tb = _as_tensor(a), _as_tensor(b)
    x, y = ta.data, tb.data
    if x.ndim == 0 or y.ndim == 0 or (x.ndim == 1 and y.ndim == 1):
        raise ShapeError(f"matmul: unsupported operand shapes {x.shape} and {y.shape}")
    inner = y.shape[0] if y.ndim == 1 else y.shape[-2]
    if x.shape[-1] != inner:
        raise ShapeError(f"matmul: inner dimensions differ, {x.shape} @ {y.shape}")
    try:
        out = np.matmul(x, y)
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions differ, {x.shape} @ {y.shape}") from None

    def vjp(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        left = x[None, :] if x.ndim == 1 else x
        right = y[:, None] if y.ndim == 1 else y
        upstream = g
        if x.ndim == 1:
            upstream = np.expand_dims(upstream, -2)
        if y.ndim == 1:
            upstream = np.expand_dims(upstream, -1)
        ga = gb = None
        if ta.requires_grad:
            ga = np.matmul(upstream, np.swapaxes(right, -1, -2))
            if x.ndim == 1:
                ga = ga.squeeze(-2)
        if tb.requires_grad:
            gb = np.matmul(np.swapaxes(left, -1, -2), upstream)
            if y.ndim == 1:
                gb = gb.squeeze(-1)
        return ga, gb

    return _emit(OpKind.MATMUL, (ta, tb), out, vjp)


# --- reductions -------------------------------------------------------------


def sum_(a: Operand, axis: Axes = None, keepdims: bool = False) -> Tensor:
    ta = _as_tensor(a)
    shape = ta.shape
    axes = _normalize_axes(axis, ta.ndim)

    def vjp(g: np.ndarray) -> Tuple[np.ndarray]:
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g, shape),)

    return _emit(OpKind.SUM, (ta,), ta.data.sum(axis=axes, keepdims=keepdims), vjp)


def mean(a: Operand, axis: Axes = None, keepdims: bool = False) -> Tensor:
    ta = _as_tensor(a)
    shape = ta.shape
    axes = _normalize_axes(axis, ta.ndim)
    count = int(np.prod([shape[i] for i in axes])) if axes else 1
    if count == 0:
        raise ShapeError("mean: reduction over an empty axis")

    def vjp(g: np.ndarray) -> Tuple[np.ndarray]:
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g / count, shape),)

    return _emit(OpKind.MEAN, (ta,), ta.data.mean(axis=axes, keepdims=keepdims), vjp)


def logsumexp(a: Operand, axis: int = -1, keepdims: bool = False) -> Tensor:
    ta = _as_tensor(a)
    x = ta.data
    peak = x.max(axis=axis, keepdims=True)
    shifted = np.exp(x - peak)
    total = shifted.sum(axis=axis, keepdims=True)
    out = peak + np.log(total)
    weights = shifted / total

    def vjp(g: np.ndarray) -> Tuple[np.ndarray]:
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * weights,)

    return _emit(OpKind.LOGSUMEXP, (ta,), out if keepdims else out.squeeze(axis), vjp)


# --- nonlinearities ---------------------------------------------------------


def sigmoid(a: Operand) -> Tensor:
    ta = _as_tensor(a)
    x = ta.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit(OpKind.SIGMOID, (ta,), out, lambda g: (g * out * (1.0 - out),))


def leaky_relu(a: Operand, slope: float = DEFAULT_LEAKY_SLOPE) -> Tensor:
    ta = _as_tensor(a)
    x = ta.data
    positive = x > 0
    out = np.where(positive, x, slope * x)
    return _emit(OpKind.LEAKY_RELU, (ta,), out, lambda g: (np.where(positive, g, slope * g),))


def log(a: Operand) -> Tensor:
    ta = _as_tensor(a)
    x = ta.data
    if np.any(x <= 0):
        raise NumericError("log: argument outside (0, inf)")
    return _emit(OpKind.LOG, (ta,), np.log(x), lambda g: (g / x,))


def exp(a: Operand) -> Tensor:
    ta = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(ta.data)
    return _emit(OpKind.EXP, (ta,), out, lambda g: (g * out,))


def softmax(a: Operand, axis: int = -1) -> Tensor:
    ta = _as_tensor(a)
    x = ta.data
    shifted = np.exp(x - x.max(axis=axis, keepdims=True))
    out = shifted / shifted.sum(axis=axis, keepdims=True)

    def vjp(g: np.ndarray) -> Tuple[np.ndarray]:
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit(OpKind.SOFTMAX, (ta,), out, vjp)


def clamp(a: Operand, low: float, high: float) -> Tensor:
    """Clip into [low, high]; gradient passes only inside the interval."""
    if low > high:
        raise ContractError(f"clamp: low {low} exceeds high {high}")
    ta = _as_tensor(a)
    x = ta.data
    inside = (x >= low) & (x <= high)
    return _emit(OpKind.CLAMP, (ta,), np.clip(x, low, high), lambda g: (np.where(inside, g, 0.0),))


def gradient_reversal(a: Operand, lam: float = 1.0) -> Tensor:
    """
    Identity on the forward pass; multiplies the incoming gradient by -lam on the way back.

    Args:
        a: Input tensor
        lam: Reversal coefficient, must be non-negative

    Raises:
        ContractError: If lam is negative
    """
    if lam < 0:
        raise ContractError(f"gradient_reversal: lambda must be >= 0, got {lam}")
    ta = _as_tensor(a)
    return _emit(OpKind.GRADIENT_REVERSAL, (ta,), ta.data.copy(), lambda g: (-lam * g,))


# --- structure --------------------------------------------------------------


def concat(tensors: Sequence[Operand], axis: int = 0) -> Tensor:
    parts = tuple(_as_tensor(t) for t in tensors)
    if not parts:
        raise ShapeError("concat: no inputs")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    sizes = [p.data.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g: np.ndarray) -> Tuple[np.ndarray, ...]:
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(OpKind.CONCAT, parts, out, vjp)


def slice_(a: Operand, key: IndexKey) -> Tensor:
    ta = _as_tensor(a)
    try:
        out = np.array(ta.data[key])
    except IndexError as e:
        raise ShapeError(f"slice: {e}") from None
    basic = _is_basic_index(key)

    def vjp(g: np.ndarray) -> Tuple[np.ndarray]:
        full = np.zeros_like(ta.data)
        if basic:
            full[key] += g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _emit(OpKind.SLICE, (ta,), out, vjp)


def broadcast_to(a: Operand, shape: Sequence[int]) -> Tensor:
    ta = _as_tensor(a)
    target = tuple(shape)
    if _broadcast_shape(OpKind.BROADCAST, ta.shape, target) != target:
        raise ShapeError(f"broadcast: cannot expand {ta.shape} to {target}")
    return _emit(OpKind.BROADCAST, (ta,), np.broadcast_to(ta.data, target).copy(), lambda g: (g,))


def reshape(a: Operand, shape: Sequence[int]) -> Tensor:
    ta = _as_tensor(a)
    original = ta.shape
    try:
        out = ta.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {original} as {tuple(shape)}") from None
    return _emit(OpKind.RESHAPE, (ta,), out.copy(), lambda g: (g.reshape(original),))


def transpose(a: Operand, axes: Optional[Sequence[int]] = None) -> Tensor:
    ta = _as_tensor(a)
    order = tuple(reversed(range(ta.ndim))) if axes is None else tuple(axes)
    if sorted(order) != list(range(ta.ndim)):
        raise ShapeError(f"transpose: {order} is not a permutation of {ta.ndim} axes")
    inverse = tuple(np.argsort(order))
    return _emit(
        OpKind.TRANSPOSE, (ta,), ta.data.transpose(order).copy(), lambda g: (g.transpose(inverse),)
    )


_OPS: Dict[OpKind, Callable[..., Tensor]] = {
    OpKind.MATMUL: matmul,
    OpKind.ADD: add,
    OpKind.SUBTRACT: subtract,
    OpKind.MULTIPLY: multiply,
    OpKind.DIVIDE: divide,
    OpKind.NEGATE: negate,
    OpKind.SUM: sum_,
    OpKind.MEAN: mean,
    OpKind.SIGMOID: sigmoid,
    OpKind.LEAKY_RELU: leaky_relu,
    OpKind.LOG: log,
    OpKind.EXP: exp,
    OpKind.SQUARE: square,
    OpKind.CONCAT: lambda *ts, axis=0: concat(ts, axis=axis),
    OpKind.SLICE: slice_,
    OpKind.BROADCAST: broadcast_to,
    OpKind.RESHAPE: reshape,
    OpKind.TRANSPOSE: transpose,
    OpKind.SOFTMAX: softmax,
    OpKind.LOGSUMEXP: logsumexp,
    OpKind.CLAMP: clamp,
    OpKind.GRADIENT_REVERSAL: gradient_reversal,
}


def forward_op(kind: Union[OpKind, str], *inputs: Operand, **attrs: Any) -> Tensor:
    """
    Apply an operation by kind.

    Args:
        kind: Operation kind (OpKind or its string value)
        *inputs: Operands
        **attrs: Operation attributes (axis, slope, lam, shape, ...)

    Returns:
        Output tensor, recorded on the active tape when any input requires grad

    Examples:
        forward_op("matmul", eye, column)
        forward_op(OpKind.LEAKY_RELU, x, slope=0.2)
    """
    try:
        op = _OPS[OpKind(kind)]
    except ValueError:
        raise ContractError(f"unknown op kind {kind!r}") from None
    return op(*inputs, **attrs)


# --- modules ----------------------------------------------------------------


class Module:
    """Container that discovers Parameters and sub-Modules among its attributes."""

    def named_parameters(self, prefix: str = "") -> Dict[str, Parameter]:
        found: Dict[str, Parameter] = {}
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            path = f"{prefix}{name}"
            if isinstance(value, Parameter):
                found[path] = value
            elif isinstance(value, Module):
                found.update(value.named_parameters(prefix=f"{path}."))
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        found.update(item.named_parameters(prefix=f"{path}.{index}."))
        return found

    def parameters(self) -> List[Parameter]:
        return list(self.named_parameters().values())

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = True

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        """
        Copy arrays into parameters by name.

        Args:
            state: Mapping name -> array
            strict: Require exactly the module's parameter names

        Raises:
            ContractError: On unknown or (strict) missing names
            ShapeError: On shape mismatch
        """
        own = self.named_parameters()
        unknown = sorted(set(state) - set(own))
        if unknown:
            raise ContractError(f"unknown parameters in state: {unknown[:5]}")
        missing = sorted(set(own) - set(state))
        if strict and missing:
            raise ContractError(f"missing parameters in state: {missing[:5]}")
        for name, array in state.items():
            target = own[name]
            if tuple(array.shape) != target.shape:
                raise ShapeError(f"{name}: expected shape {target.shape}, got {tuple(array.shape)}")
            target.data = np.array(array, dtype=np.float64)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    """Glorot-uniform matrix of shape (fan_in, fan_out)."""
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))
