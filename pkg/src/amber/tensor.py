"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array (float32 by default, float64 for the
gradient-check harness). Every differentiable operation appends one entry
to the active ``ComputationTape``; entries are naturally in execution
order, which is a topological order of the graph, so ``backward`` is a
single reverse sweep that touches each recorded node exactly once.

Gradients accumulate into ``.grad`` on leaf tensors (tensors with
``requires_grad=True`` that were not produced by a recorded operation).
Calling ``backward`` twice without clearing accumulates, matching the
usual deep-learning convention.
"""

from __future__ import annotations

import os
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ComputationTape",
    "no_grad",
    "backward",
    "concat",
    "matmul",
    "pad_axis",
    "default_tape",
    "set_debug_checks",
]

# NaN/Inf detection on every forward op; off by default for speed.
_debug_checks = os.environ.get("AMBER_DEBUG", "") == "1"


def set_debug_checks(enabled: bool) -> None:
    global _debug_checks
    _debug_checks = bool(enabled)


class GraphError(RuntimeError):
    """Raised for malformed backward requests (non-scalar or detached loss)."""


class _TapeEntry:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class ComputationTape:
    """Ordered record of operations; usable as a context manager.

    Entries are appended in execution order. Entering the context makes
    this tape the recording target; leaving restores the previous one and
    (by default) lets the recorded graph be garbage collected.
    """

    def __init__(self):
        self.entries: list[_TapeEntry] = []

    def __enter__(self) -> "ComputationTape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.pop()

    def clear(self) -> None:
        self.entries.clear()

    def __len__(self) -> int:
        return len(self.entries)


_tape_stack: list[ComputationTape] = [ComputationTape()]
_grad_enabled: bool = True


def default_tape() -> ComputationTape:
    """The bottom-of-stack tape used when no explicit tape is active."""
    return _tape_stack[0]


def active_tape() -> ComputationTape:
    return _tape_stack[-1]


def grad_enabled() -> bool:
    return _grad_enabled


class no_grad:
    """Context manager that suspends recording entirely."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev


def _as_dtype(dtype) -> np.dtype:
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise TypeError(f"tensors are float32/float64 only, got {dt}")
    return dt


class Tensor:
    """N-dimensional array of 32-bit (or 64-bit) reals with optional grad."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            if isinstance(data, (np.ndarray, np.generic)) and \
                    data.dtype in (np.float32, np.float64):
                arr = np.asarray(data)
            else:
                arr = np.asarray(data, dtype=np.float32)
        else:
            arr = np.asarray(data, dtype=_as_dtype(dtype))
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    # --- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    # --- arithmetic ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -_scalar(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division unsupported; multiply by a reciprocal")
        return mul(self, 1.0 / _scalar(other))

    def __matmul__(self, other):
        return matmul(self, other)

    # --- structure -----------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


def _scalar(value) -> float:
    if isinstance(value, (int, float, np.floating, np.integer)):
        return float(value)
    raise TypeError(f"expected a scalar, got {type(value).__name__}")


def _check_same_dtype(*tensors: Tensor) -> np.dtype:
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise TypeError(f"mixed tensor dtypes {dt} and {t.data.dtype}")
    return dt


def from_op(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op result, recording a tape entry when tracking is on.

    ``backward_fn`` receives the output gradient array and returns one
    gradient array (or None) per input, in order.
    """
    # numpy collapses 0-d results to scalar types; keep them 0-d arrays so
    # the float64 of a scalar-valued op (e.g. a summed loss) is preserved.
    data = np.asarray(data)
    if _debug_checks and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by a forward op")
    track = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        _tape_stack[-1].entries.append(_TapeEntry(tuple(inputs), out, backward_fn))
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- primitive ops ------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_dtype(a, b)
        out = a.data + b.data
        return from_op(out, (a, b), lambda g: (unbroadcast(g, a.data.shape),
                                               unbroadcast(g, b.data.shape)))
    c = _scalar(b)
    return from_op(a.data + c, (a,), lambda g: (g,))


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_dtype(a, b)
        out = a.data * b.data
        return from_op(out, (a, b), lambda g: (unbroadcast(g * b.data, a.data.shape),
                                               unbroadcast(g * a.data, b.data.shape)))
    c = _scalar(b)
    return from_op(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over batch axes."""
    _check_same_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have ndim >= 2")
    out = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, b.data.swapaxes(-1, -2))
        gb = np.matmul(a.data.swapaxes(-1, -2), g)
        return unbroadcast(ga, a.data.shape), unbroadcast(gb, b.data.shape)

    return from_op(out, (a, b), bwd)


def reshape(t: Tensor, shape) -> Tensor:
    orig = t.data.shape
    out = t.data.reshape(shape)
    return from_op(out, (t,), lambda g: (g.reshape(orig),))


def transpose(t: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(int(np.argsort(axes)[i]) for i in range(len(axes)))
    out = np.ascontiguousarray(np.transpose(t.data, axes))
    return from_op(out, (t,), lambda g: (np.transpose(g, inverse),))


def tensor_sum(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = t.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, t.data.shape).astype(t.data.dtype, copy=True),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, t.data.shape).astype(t.data.dtype, copy=True),)

    return from_op(np.asarray(out, dtype=t.data.dtype), (t,), bwd)


def tensor_mean(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = t.data.size
    elif isinstance(axis, int):
        count = t.data.shape[axis]
    else:
        count = int(np.prod([t.data.shape[ax] for ax in axis]))
    return mul(tensor_sum(t, axis, keepdims), 1.0 / count)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    _check_same_dtype(*tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offsets, axis=axis))

    return from_op(out, tuple(tensors), bwd)


def pad_axis(t: Tensor, axis: int, before: int, after: int) -> Tensor:
    """Zero-pad one axis."""
    if before == 0 and after == 0:
        return t
    widths = [(0, 0)] * t.ndim
    widths[axis] = (before, after)
    out = np.pad(t.data, widths)
    n = t.data.shape[axis]
    sl = [slice(None)] * t.ndim
    sl[axis] = slice(before, before + n)
    sl = tuple(sl)
    return from_op(out, (t,), lambda g: (np.ascontiguousarray(g[sl]),))


def exp(t: Tensor) -> Tensor:
    out = np.exp(t.data)
    return from_op(out, (t,), lambda g: (g * out,))


def log(t: Tensor) -> Tensor:
    out = np.log(t.data)
    return from_op(out, (t,), lambda g: (g / t.data,))


# --- backward sweep ------------------------------------------------------

def backward(loss: Tensor, tape: Optional[ComputationTape] = None) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    Single reverse sweep over the tape's execution-ordered entries; each
    recorded node is visited once. Raises ``GraphError`` for a non-scalar
    loss or a loss with no recorded path to any tracked leaf.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        tape = _tape_stack[-1]
    produced = {id(e.output) for e in tape.entries}
    if not loss.requires_grad or id(loss) not in produced:
        if loss.requires_grad and id(loss) not in produced:
            # a bare leaf: d loss / d loss = 1
            seed = np.ones_like(loss.data)
            loss.grad = seed if loss.grad is None else loss.grad + seed
            return
        raise GraphError("loss is detached from every tracked tensor")

    flow: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for entry in reversed(tape.entries):
        g = flow.pop(id(entry.output), None)
        if g is None:
            continue
        grads = entry.backward_fn(g)
        for inp, gi in zip(entry.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in flow:
                flow[key] = flow[key] + gi
            else:
                flow[key] = gi
            if key not in produced:
                leaves[key] = inp
    for key, leaf in leaves.items():
        g = flow.get(key)
        if g is None:
            continue
        g = np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.data.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
