"""Dense float64 tensors with tape-based reverse-mode differentiation."""

import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import InvalidArgumentError


# =============================================================================
# Tensor and Tape
# =============================================================================

class Tensor:
    """Immutable row-major array of 64-bit floats.

    Operations record themselves only inside an active `Tape` and only when
    one of their inputs requires grad.
    """

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.data.flags.writeable = False
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise InvalidArgumentError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)


@dataclass
class Record:
    inputs: tuple
    output: Tensor
    vjp: Callable[[np.ndarray], tuple]


_local = threading.local()


def _active_tapes() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


class Tape:
    """Ordered record of differentiable operations.

    Used as a context manager; a tape supports one backward pass until
    `reset()` is called.
    """

    def __init__(self):
        self.records: list[Record] = []
        self.consumed = False

    def __enter__(self):
        _active_tapes().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _active_tapes().remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def reset(self):
        self.records.clear()
        self.consumed = False


def current_tape() -> Optional[Tape]:
    tapes = _active_tapes()
    return tapes[-1] if tapes else None


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _emit(data, inputs: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append(Record(tuple(inputs), out, vjp))
    return out


# =============================================================================
# Shape helpers
# =============================================================================

def _check_broadcast(op: str, a: Tensor, b: Tensor):
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    if a.shape[1:] == b.shape or b.shape[1:] == a.shape:
        return
    raise InvalidArgumentError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum())
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    return grad


# =============================================================================
# Elementwise arithmetic
# =============================================================================

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _emit(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    return _emit(a.data / b.data, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,))


def scale_rows(x, w) -> Tensor:
    """Multiply row i of a 2-D tensor by w[i]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.shape != (x.shape[0],):
        raise InvalidArgumentError(f"scale_rows: shapes {x.shape} and {w.shape}")
    return _emit(x.data * w.data[:, None], (x, w),
                 lambda g: (g * w.data[:, None], (g * x.data).sum(axis=1)))


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"minimum: shapes {a.shape} and {b.shape}")
    pick_a = a.data <= b.data
    return _emit(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (g * pick_a, g * ~pick_a))


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"maximum: shapes {a.shape} and {b.shape}")
    pick_a = a.data >= b.data
    return _emit(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (g * pick_a, g * ~pick_a))


# =============================================================================
# Nonlinearities
# =============================================================================

def relu(x) -> Tensor:
    x = as_tensor(x)
    on = x.data > 0
    return _emit(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _emit(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return _emit(t, (x,), lambda g: (g * (1.0 - t * t),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data)
    return _emit(e, (x,), lambda g: (g * e,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _emit(np.log(x.data), (x,), lambda g: (g / x.data,))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    return _emit(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    s = np.exp(out)
    return _emit(out, (x,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


def row_norm(x) -> Tensor:
    """L2 norm over the last axis."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=-1))

    def vjp(g):
        safe = np.where(norm > 0, norm, 1.0)
        return (np.expand_dims(g / safe * (norm > 0), -1) * x.data,)

    return _emit(norm, (x,), vjp)


# =============================================================================
# Reductions and structure
# =============================================================================

def sum(x, axis: Optional[int] = None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _emit(x.data.sum(axis=axis), (x,), vjp)


def mean(x, axis: Optional[int] = None) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else x.shape[axis]
    if count == 0:
        raise InvalidArgumentError("mean of an empty tensor")

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g / count, axis), x.shape).copy(),)

    return _emit(x.data.mean(axis=axis), (x,), vjp)


def amax(x) -> Tensor:
    """Maximum over all entries; the gradient goes to the first maximizer."""
    x = as_tensor(x)
    flat = int(np.argmax(x.data))

    def vjp(g):
        out = np.zeros(x.data.size)
        out[flat] = g
        return (out.reshape(x.shape),)

    return _emit(x.data.reshape(-1)[flat], (x,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise InvalidArgumentError("concat of no tensors")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise InvalidArgumentError(f"concat: {e}") from e
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit(data, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError as e:
        raise InvalidArgumentError(f"reshape: {e}") from e
    return _emit(data, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise InvalidArgumentError(f"transpose needs a 2-D tensor, got {x.shape}")
    return _emit(x.data.T, (x,), lambda g: (g.T,))


def take(x, index) -> Tensor:
    """Gather entries (1-D) or rows (2-D) along the first axis."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)

    def vjp(g):
        if x.ndim == 1:
            return (np.bincount(index.ravel(), weights=g.ravel(), minlength=x.shape[0]),)
        out = np.zeros(x.shape)
        np.add.at(out, index, g)
        return (out,)

    return _emit(x.data[index], (x,), vjp)


def segment_mean(x, labels, count: int) -> Tensor:
    """Mean of the rows of x that share a label, one output row per label."""
    x = as_tensor(x)
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if labels.shape[0] != x.shape[0]:
        raise InvalidArgumentError(f"segment_mean: {labels.shape[0]} labels for {x.shape[0]} rows")
    sizes = np.bincount(labels, minlength=count).astype(np.float64)
    safe = np.where(sizes > 0, sizes, 1.0)
    if x.ndim == 1:
        data = np.bincount(labels, weights=x.data, minlength=count) / safe
    else:
        data = np.stack([np.bincount(labels, weights=x.data[:, j], minlength=count)
                         for j in range(x.shape[1])], axis=1) / safe[:, None]

    def vjp(g):
        if x.ndim == 1:
            return ((g / safe)[labels],)
        return ((g / safe[:, None])[labels],)

    return _emit(data, (x,), vjp)


# =============================================================================
# Linear algebra and losses
# =============================================================================

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise InvalidArgumentError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def vjp(g):
        if a.ndim == 2 and b.ndim == 2:
            return g @ b.data.T, a.data.T @ g
        if a.ndim == 1 and b.ndim == 2:
            return b.data @ g, np.outer(a.data, g)
        if a.ndim == 2:
            return np.outer(g, b.data), a.data.T @ g
        return g * b.data, g * a.data

    return _emit(a.data @ b.data, (a, b), vjp)


def cross_entropy(logits, targets) -> Tensor:
    """Mean negative log-likelihood of integer targets under row softmax."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64).ravel()
    if logits.ndim != 2 or targets.shape[0] != logits.shape[0]:
        raise InvalidArgumentError(
            f"cross_entropy: logits {logits.shape} vs {targets.shape[0]} targets")
    n = targets.shape[0]
    if n == 0:
        return Tensor(0.0)
    if targets.min() < 0 or targets.max() >= logits.shape[1]:
        raise InvalidArgumentError("cross_entropy: target class out of range")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -log_probs[rows, targets].mean()

    def vjp(g):
        grad = np.exp(log_probs)
        grad[rows, targets] -= 1.0
        return (grad * (g / n),)

    return _emit(loss, (logits,), vjp)


# =============================================================================
# Backward pass and gradient checking
# =============================================================================

def backward(tape: Tape, loss: Tensor) -> dict:
    """Reverse accumulation over the tape.

    Returns a mapping from every requires-grad leaf reached by the loss to
    its gradient, and stores the same array on the leaf's `grad`.
    """
    if loss.data.size != 1:
        raise InvalidArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise InvalidArgumentError("tape already used for a backward pass; call reset()")
    tape.consumed = True

    produced = {id(rec.output) for rec in tape.records}
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad and id(loss) not in produced:
        leaves[id(loss)] = loss

    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for tensor, tg in zip(rec.inputs, rec.vjp(g)):
            if tg is None or not tensor.requires_grad:
                continue
            tg = np.asarray(tg, dtype=np.float64).reshape(tensor.shape)
            key = id(tensor)
            grads[key] = grads[key] + tg if key in grads else tg
            if key not in produced:
                leaves[key] = tensor

    result = {}
    for key, tensor in leaves.items():
        tensor.grad = grads.get(key, np.zeros(tensor.shape))
        result[tensor] = tensor.grad
    return result


def grad_check(function: Callable[[Tensor], Tensor], point: Tensor, eps: float = 1e-6,
               floor: float = 1e-8) -> float:
    """Max relative error between backward() and central differences.

    The error of one coordinate is |g_ad - g_fd| / max(floor, |g_fd|).
    """
    if eps <= 0:
        raise InvalidArgumentError("eps must be positive")
    base = np.array(point.data, dtype=np.float64)
    x = Tensor(base, requires_grad=True)
    with Tape() as tape:
        loss = function(x)
    analytic = backward(tape, loss).get(x, np.zeros(base.shape))

    numeric = np.zeros(base.shape)
    for idx in np.ndindex(base.shape):
        plus = base.copy()
        plus[idx] += eps
        minus = base.copy()
        minus[idx] -= eps
        numeric[idx] = (function(Tensor(plus)).item() - function(Tensor(minus)).item()) / (2 * eps)

    if base.size == 0:
        return 0.0
    err = np.abs(analytic - numeric) / np.maximum(floor, np.abs(numeric))
    return float(err.max())
