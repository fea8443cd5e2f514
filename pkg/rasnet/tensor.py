"""
Tensor values and tape-based reverse-mode automatic differentiation.

Operations executed inside an active ``GradTape`` are recorded in execution
order together with a backward rule; ``backward`` replays the tape in reverse
and sums gradients into every tracked leaf. Outside a tape nothing is
recorded, which is the inference fast path.
"""

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import settings
from .errors import ContractError, DimensionError, NonFiniteError

ArrayLike = Union[np.ndarray, float, int, Sequence]

_state = threading.local()


def get_default_dtype() -> np.dtype:
    """Dtype used for new parameters and for tensors built from Python values."""
    return getattr(_state, "dtype", np.dtype(np.float32))


def resolve_dtype(dtype=None) -> np.dtype:
    # np.dtype instances are falsy
    return np.dtype(dtype) if dtype is not None else get_default_dtype()


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default dtype (float64 is the verification mode)."""
    previous = get_default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = previous


def _as_array(data: ArrayLike, dtype=None) -> np.ndarray:
    if dtype is not None:
        return np.ascontiguousarray(data, dtype=dtype)
    if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
        return np.ascontiguousarray(data)
    return np.ascontiguousarray(data, dtype=get_default_dtype())


class Tensor:
    """n-dimensional array with optional gradient tracking."""

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.is_leaf = True
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # Operators
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self.dtype)))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None) -> "Tensor":
        return tensor_sum(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return tensor_mean(self, axis)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class TapeEntry:
    """One recorded operation."""
    name: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class GradTape:
    """
    Ordered record of differentiable operations.

    Use as a context manager; a tape belongs to one thread and must not be
    shared between threads.
    """

    def __init__(self):
        self.entries: List[TapeEntry] = []

    def __enter__(self) -> "GradTape":
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        _state.tapes.pop()

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, entry: TapeEntry):
        self.entries.append(entry)

    def op_names(self) -> List[str]:
        return [entry.name for entry in self.entries]


def active_tape() -> Optional[GradTape]:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


def record_op(
    name: str,
    inputs: Sequence[Tensor],
    out_data: np.ndarray,
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
) -> Tensor:
    """Wrap a forward result and record it on the active tape when an input is tracked."""
    if settings.check_finite and not np.isfinite(out_data).all():
        raise NonFiniteError(name)

    tape = active_tape()
    tracked = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=tracked)
    if tracked:
        out.is_leaf = False
        tape.record(TapeEntry(name, tuple(inputs), out, backward_fn))
    return out


def backward(loss: Tensor, tape: Optional[GradTape] = None) -> Dict[Tensor, np.ndarray]:
    """
    Reverse-mode sweep from a scalar loss.

    Gradients are summed into ``leaf.grad`` for every tracked leaf reached
    (callers reset them between steps). Returns the gradients contributed by
    this call, keyed by leaf.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else active_tape()
    if tape is None:
        raise ContractError("backward needs the tape the loss was recorded on")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}
    if loss.is_leaf and loss.requires_grad:
        leaves[id(loss)] = loss

    for entry in reversed(tape.entries):
        grad_out = grads.pop(id(entry.output), None)
        if grad_out is None:
            continue
        input_grads = entry.backward(grad_out)
        for tensor, grad in zip(entry.inputs, input_grads):
            if grad is None or not tensor.requires_grad:
                continue
            if grad.shape != tensor.shape:
                raise ContractError(
                    f"{entry.name} backward produced shape {grad.shape} for an input of shape {tensor.shape}"
                )
            key = id(tensor)
            grads[key] = grads[key] + grad if key in grads else grad
            if tensor.is_leaf:
                leaves[key] = tensor

    result: Dict[Tensor, np.ndarray] = {}
    for key, leaf in leaves.items():
        grad = np.asarray(grads[key], dtype=leaf.dtype)
        leaf.grad = grad.copy() if leaf.grad is None else leaf.grad + grad
        result[leaf] = grad
    return result


# Elementwise and structural primitives

def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shapes(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


def add(a, b) -> Tensor:
    a = _wrap(a, getattr(b, "dtype", None))
    b = _wrap(b, a.dtype)
    _broadcast_shapes(a, b, "add")

    def backward_fn(grad):
        return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)

    return record_op("add", (a, b), a.data + b.data, backward_fn)


def mul(a, b) -> Tensor:
    a = _wrap(a, getattr(b, "dtype", None))
    b = _wrap(b, a.dtype)
    _broadcast_shapes(a, b, "mul")
    a_data, b_data = a.data, b.data

    def backward_fn(grad):
        return _unbroadcast(grad * b_data, a.shape), _unbroadcast(grad * a_data, b.shape)

    return record_op("mul", (a, b), a_data * b_data, backward_fn)


def neg(a: Tensor) -> Tensor:
    return record_op("neg", (a,), -a.data, lambda grad: (-grad,))


def tensor_sum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def backward_fn(grad):
        if axis is not None:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, shape).copy(),)

    return record_op("sum", (a,), np.asarray(a.data.sum(axis=axis)), backward_fn)


def tensor_mean(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    count = a.size if axis is None else int(np.prod([shape[i] for i in np.atleast_1d(axis)]))

    def backward_fn(grad):
        if axis is not None:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad / count, shape).copy(),)

    return record_op("mean", (a,), np.asarray(a.data.mean(axis=axis)), backward_fn)


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    original = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {original} into {shape}") from exc
    return record_op("reshape", (a,), out, lambda grad: (grad.reshape(original),))
