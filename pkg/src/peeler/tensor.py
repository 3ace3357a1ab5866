"""Reverse-mode automatic differentiation over dense float64 arrays.

Operations executed while a :class:`Tape` is active are recorded on it together
with a vector-Jacobian product closure. :func:`backward` walks the tape in
reverse and accumulates gradients into every leaf tensor created with
``requires_grad=True``.

The active tape is thread-local, so independent episodes may be run on
different threads without sharing any mutable state.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "tensor",
    "backward",
    "affine",
    "matmul",
    "relu",
    "softplus",
    "exp",
    "log",
    "square",
    "log_softmax",
    "masked_fill",
    "gather_rows",
    "index_rows",
    "reshape",
    "sum",
    "mean",
]

_ids = itertools.count(1)
_local = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """A float64 array with an optional gradient.

    ``data`` is always a C-contiguous float64 ndarray. ``grad`` is ``None``
    until a backward pass reaches the tensor (leaves only).
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.node_id = next(_ids)
        self._recorded = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return negative(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of executed operations.

    Use as a context manager; operations run inside the block are recorded
    when at least one operand is tracked (a parameter leaf or a recorded
    output). Tapes nest; the innermost is active.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._prev: Tape | None = None

    def __enter__(self) -> "Tape":
        self._prev = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._prev
        self._prev = None

    def __len__(self) -> int:
        return len(self.records)

    def tracks(self, t: Tensor) -> bool:
        return t.requires_grad or t._recorded


def _active_tape() -> Tape | None:
    return getattr(_local, "tape", None)


def _emit(data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap ``data`` and record the op on the active tape if needed.

    ``vjp(g)`` must return one gradient (or ``None``) per input.
    """
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(tape.tracks(t) for t in inputs):
        out._recorded = True
        tape.records.append(_Record(out, tuple(inputs), vjp))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every parameter leaf.

    Calling twice without clearing gradients adds the gradients twice.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not (loss._recorded or loss.requires_grad):
        raise ValueError("loss was not produced on a tape")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad and not loss._recorded:
        leaves[loss.node_id] = loss
    for rec in reversed(tape.records):
        g = grads.pop(rec.out.node_id, None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None or not tape.tracks(inp):
                continue
            if inp.node_id in grads:
                grads[inp.node_id] = grads[inp.node_id] + gi
            else:
                grads[inp.node_id] = gi
            if inp.requires_grad and not inp._recorded:
                leaves[inp.node_id] = inp
    for nid, leaf in leaves.items():
        g = grads.get(nid)
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _emit(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def subtract(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "subtract")
    return _emit(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def multiply(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "multiply")
    return _emit(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def negative(a) -> Tensor:
    a = _as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = _as_tensor(a)
    return _emit(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _emit(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def softplus(a) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""
    a = _as_tensor(a)
    x = a.data
    out = np.logaddexp(0.0, x)
    # sigmoid, split by sign to stay finite
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _emit(out, (a,), lambda g: (g * sig,))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return _emit(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def affine(x, W, b) -> Tensor:
    """x @ W + b for x[batch, d_in], W[d_in, d_out], b[d_out]."""
    x, W, b = _as_tensor(x), _as_tensor(W), _as_tensor(b)
    if x.ndim != 2 or W.ndim != 2 or b.ndim != 1:
        raise ShapeError(f"affine: expected 2-D x, 2-D W, 1-D b; got {x.shape}, {W.shape}, {b.shape}")
    if x.shape[1] != W.shape[0]:
        raise ShapeError(f"affine: x has width {x.shape[1]} but W expects {W.shape[0]}")
    if b.shape[0] != W.shape[1]:
        raise ShapeError(f"affine: bias length {b.shape[0]} != output width {W.shape[1]}")
    out = x.data @ W.data + b.data
    return _emit(out, (x, W, b), lambda g: (g @ W.data.T, x.data.T @ g, g.sum(axis=0)))


def log_softmax(z) -> Tensor:
    """Row-wise log-softmax over the last axis using a max-shifted log-sum-exp."""
    z = _as_tensor(z)
    if z.ndim < 1 or z.shape[-1] < 1:
        raise ShapeError(f"log_softmax: need at least one class, got shape {z.shape}")
    m = z.data.max(axis=-1, keepdims=True)
    shifted = z.data - m
    e = np.exp(shifted)
    # drop one max entry (exactly 1) and use log1p so tiny tails are not rounded away
    top = np.argmax(z.data, axis=-1)[..., None]
    np.put_along_axis(e, top, 0.0, axis=-1)
    out = shifted - np.log1p(e.sum(axis=-1, keepdims=True))
    p = np.exp(out)
    return _emit(out, (z,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def masked_fill(a, mask, value: float = 0.0) -> Tensor:
    """Replace entries where ``mask`` is true by a constant; they get zero gradient."""
    a = _as_tensor(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    return _emit(np.where(mask, value, a.data), (a,), lambda g: (np.where(mask, 0.0, g),))


def gather_rows(a, index) -> Tensor:
    """Pick ``a[i, index[i]]`` for each row i, giving a 1-D tensor."""
    a = _as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    if a.ndim != 2 or idx.shape != (a.shape[0],):
        raise ShapeError(f"gather_rows: need 2-D input and one index per row, got {a.shape}, {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise IndexError(f"gather_rows: index out of range [0, {a.shape[1]})")
    rows = np.arange(a.shape[0])

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[rows, idx] = g
        return (ga,)

    return _emit(a.data[rows, idx], (a,), vjp)


def index_rows(a, index) -> Tensor:
    """Select rows ``a[index]`` (repeats allowed; gradients scatter-add)."""
    a = _as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _emit(a.data[idx], (a,), vjp)


def reshape(a, shape: Iterable[int]) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit(out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return multiply(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))
