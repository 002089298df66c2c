"""Dense tensor with tape-based reverse-mode differentiation.

Operations executed while a :class:`GradientTape` is active, and that touch at
least one tensor with ``requires_grad=True``, are recorded on that tape.  Outside
a tape nothing is recorded, so plain inference carries no graph overhead.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> with GradientTape() as tape:
    ...     y = (x * x).sum()
    >>> tape.backward(y)[x]
    array([6.])
"""

from __future__ import annotations

import threading
import weakref
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class TapeError(RuntimeError):
    """Misuse of the gradient tape (non-scalar loss, replay twice, foreign loss)."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


_state = threading.local()


def _tape_stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def active_tape() -> Optional["GradientTape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class _Record:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class GradientTape:
    """Ordered log of differentiable operations, replayed in reverse by :meth:`backward`.

    A tape is confined to the thread that opened it.  After one replay it must be
    :meth:`reset` before it can record or replay again; gradients are never
    silently accumulated across steps.
    """

    def __init__(self) -> None:
        self.records: list[_Record] = []
        self._replayed = False

    def __enter__(self) -> "GradientTape":
        if self._replayed:
            raise TapeError("tape was already replayed; call reset() before reuse")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: "Tensor", inputs: Sequence["Tensor"], backward: Callable) -> None:
        if self._replayed:
            raise TapeError("cannot record on a replayed tape; call reset() first")
        out._tape_ref = weakref.ref(self)
        self.records.append(_Record(out, tuple(inputs), backward))

    def reset(self) -> None:
        self.records.clear()
        self._replayed = False

    def backward(self, loss: "Tensor") -> dict:
        """Populate ``.grad`` on every reachable leaf that requires grad.

        Returns a mapping from leaf tensor to its gradient array.
        """
        if loss.size != 1:
            raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if self._replayed:
            raise TapeError("tape was already replayed; call reset() before another backward()")
        if loss.tape is not self:
            raise TapeError("loss was not recorded on this tape")
        self._replayed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = {id(r.out) for r in self.records}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for inp, ig in zip(rec.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                if key not in produced:
                    leaves[key] = inp

        result = {}
        for key, leaf in leaves.items():
            g = grads[key]
            if g.shape != leaf.shape:
                g = np.broadcast_to(g, leaf.shape).copy()
            leaf.grad = g.astype(leaf.dtype, copy=False)
            result[leaf] = leaf.grad
        # the saved activations are no longer needed once replayed
        self.records.clear()
        return result


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    arr = np.asarray(data, dtype=dtype)
    if dtype is None and not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """N-dimensional floating-point array that can take part in differentiation.

    Parameters
    ----------
    data : array_like
        Values; integer input is promoted to float32.
    requires_grad : bool
        Whether gradients should be tracked for this tensor.
    dtype : numpy dtype, optional
        Storage precision (float32 for training, float64 for gradient checks).
    name : str, optional
        Label used in error messages and registries.
    """

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape_ref: Optional[weakref.ref] = None

    # -- array-like surface -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    @property
    def tape(self) -> Optional[GradientTape]:
        """The tape this tensor was recorded on, if it is still alive."""
        return self._tape_ref() if self._tape_ref is not None else None

    def backward(self) -> dict:
        tape = self.tape
        if tape is None:
            raise TapeError("tensor was not produced under a live GradientTape")
        return tape.backward(self)

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return index_select(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return amax(self, axis, keepdims)

    def abs(self):
        return abs_(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def make_output(data: np.ndarray, inputs: Iterable[Tensor], backward: Callable, flops: float = 0) -> Tensor:
    """Wrap ``data`` as an op result and record it if any input needs a gradient.

    ``flops`` is the forward cost reported to any active :class:`FlopCounter`.
    """
    inputs = tuple(inputs)
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward)
    if flops:
        add_flops(flops)
    return out


# -- FLOP accounting ----------------------------------------------------------

class FlopCounter:
    """Context manager that tallies floating-point operations of executed ops."""

    def __init__(self) -> None:
        self.flops = 0

    def __enter__(self) -> "FlopCounter":
        stack = getattr(_state, "counters", None)
        if stack is None:
            _state.counters = stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.counters.pop()


def add_flops(n: float) -> None:
    for c in getattr(_state, "counters", ()) or ():
        c.flops += int(round(n))


# -- elementwise arithmetic ---------------------------------------------------

def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _operands(a, b) -> tuple[Tensor, Tensor]:
    a_t = isinstance(a, Tensor)
    b_t = isinstance(b, Tensor)
    if a_t and not b_t:
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif b_t and not a_t:
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not a_t and not b_t:
        a, b = Tensor(a), Tensor(b)
    return a, b


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} against {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = _operands(a, b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    out_data = a.data + b.data
    return make_output(out_data, (a, b), backward, flops=out_data.size)


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    out_data = a.data - b.data
    return make_output(out_data, (a, b), backward, flops=out_data.size)


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    out_data = a.data * b.data
    return make_output(out_data, (a, b), backward, flops=out_data.size)


def div(a, b) -> Tensor:
    a, b = _operands(a, b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_output(out, (a, b), backward, flops=out.size)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    c = float(c)

    def backward(g):
        return (g * c,)

    out_data = x.data * x.dtype.type(c)
    return make_output(out_data, (x,), backward, flops=out_data.size)


def power(x: Tensor, exponent: float) -> Tensor:
    p = float(exponent)

    def backward(g):
        return (g * p * x.data ** (p - 1),)

    out_data = x.data ** p
    return make_output(out_data, (x,), backward, flops=out_data.size)


def abs_(x: Tensor) -> Tensor:
    """Absolute value; the subgradient at exactly zero is taken as 0."""

    def backward(g):
        return (g * np.sign(x.data),)

    out_data = np.abs(x.data)
    return make_output(out_data, (x,), backward, flops=out_data.size)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    out_data = np.asarray(out, dtype=x.dtype)
    return make_output(out_data, (x,), backward, flops=x.size)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    n = x.size // max(np.size(out), 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape),)

    out_data = np.asarray(out, dtype=x.dtype)
    return make_output(out_data, (x,), backward, flops=x.size)


def amax(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum reduction; tied maxima share the incoming gradient equally."""
    out_k = x.data.max(axis=axis, keepdims=True)
    out = out_k if keepdims else (out_k.reshape(()) if axis is None else np.squeeze(out_k, axis))

    def backward(g):
        mask = x.data == out_k
        count = mask.sum(axis=axis, keepdims=True)
        gk = g if (keepdims or axis is None) else np.expand_dims(g, axis)
        return (mask * (gk / count),)

    out_data = np.asarray(out, dtype=x.dtype)
    return make_output(out_data, (x,), backward, flops=x.size)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    def backward(g):
        return (g.reshape(x.shape),)

    return make_output(x.data.reshape(shape), (x,), backward)


def index_select(x: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing; the gradient scatters back into a zero array."""
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return make_output(np.array(out, copy=True), (x,), backward)


def relu(x: Tensor) -> Tensor:
    def backward(g):
        return (g * (x.data > 0),)

    out_data = np.maximum(x.data, 0)
    return make_output(out_data, (x,), backward, flops=out_data.size)


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, evaluated without overflow for large |x|."""
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)

    def backward(g):
        return (g * out * (1 - out),)

    return make_output(out, (x,), backward, flops=4 * out.size)
