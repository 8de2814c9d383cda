"""Tensors and a tape-based reverse-mode autodiff engine on top of numpy.

Every differentiable op records one node on the active :class:`Tape`.
``Tensor.backward`` replays the tape in reverse execution order and
accumulates adjoints additively into ``.grad``.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "DimensionError",
    "NumericError",
    "as_tensor",
    "get_dtype",
    "set_precision",
    "precision",
    "no_grad",
    "current_tape",
]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """Raised when an op receives or would produce non-finite values."""


_state = threading.local()


def _local():
    if not hasattr(_state, "dtype"):
        _state.dtype = np.float64
        _state.tapes = [Tape()]
        _state.enabled = True
    return _state


def get_dtype():
    return _local().dtype


def set_precision(bits: int) -> None:
    """Select 64-bit (testing) or 32-bit (training) floats for new tensors."""
    if bits not in (32, 64):
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _local().dtype = np.float64 if bits == 64 else np.float32


@contextlib.contextmanager
def precision(bits: int):
    old = get_dtype()
    set_precision(bits)
    try:
        yield
    finally:
        _local().dtype = old


@contextlib.contextmanager
def no_grad():
    st = _local()
    old = st.enabled
    st.enabled = False
    try:
        yield
    finally:
        st.enabled = old


class Tape:
    """Ordered record of executed ops.

    Each node is ``(outputs, backward_fn)``; ``backward_fn`` receives the
    adjoints of ``outputs`` (``None`` where an output received no gradient)
    and pushes contributions into its inputs.
    """

    def __init__(self):
        self.nodes: list[tuple[tuple[Tensor, ...], object]] = []

    def __len__(self):
        return len(self.nodes)

    def record(self, outputs, fn):
        self.nodes.append((outputs, fn))

    def clear(self):
        self.nodes.clear()

    def backward(self, loss: "Tensor", grad=None):
        if grad is None:
            if loss.data.size != 1:
                raise ValueError("backward() on a non-scalar needs an explicit grad")
            grad = np.ones_like(loss.data)
        loss.grad = np.asarray(grad, dtype=loss.data.dtype)
        for outputs, fn in reversed(self.nodes):
            grads = [o.grad for o in outputs]
            if all(g is None for g in grads):
                continue
            fn(*grads)
        self.clear()

    def __enter__(self):
        _local().tapes.append(self)
        return self

    def __exit__(self, *exc):
        _local().tapes.pop()
        return False


def current_tape() -> Tape:
    return _local().tapes[-1]


def _recording(*tensors) -> bool:
    if not _local().enabled:
        return False
    return any(isinstance(t, Tensor) and t.requires_grad for t in tensors)


def unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    nlead = g.ndim - len(shape)
    if nlead > 0:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def accumulate(t: "Tensor", g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = unbroadcast(g, t.data.shape)
    # never alias: a later in-place update must not leak across tensors
    t.grad = g.astype(t.data.dtype, copy=True) if t.grad is None else t.grad + g


def as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or get_dtype())
        if arr.ndim and 0 in arr.shape:
            raise DimensionError(f"zero-sized dimension in shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    # -- introspection ---------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        current_tape().backward(self, grad)

    # -- operators -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _make(data, *inputs) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = _recording(*inputs)
    out.name = None
    return out


def _record(outputs, fn):
    current_tape().record(outputs, fn)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _make(a.data + b.data, a, b)
    if out.requires_grad:
        def back(g):
            accumulate(a, g)
            accumulate(b, g)
        _record((out,), back)
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _make(a.data - b.data, a, b)
    if out.requires_grad:
        def back(g):
            accumulate(a, g)
            accumulate(b, -g)
        _record((out,), back)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _make(a.data * b.data, a, b)
    if out.requires_grad:
        def back(g):
            if a.requires_grad:
                accumulate(a, g * b.data)
            if b.requires_grad:
                accumulate(b, g * a.data)
        _record((out,), back)
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _make(a.data / b.data, a, b)
    if out.requires_grad:
        def back(g):
            if a.requires_grad:
                accumulate(a, g / b.data)
            if b.requires_grad:
                accumulate(b, -g * a.data / (b.data * b.data))
        _record((out,), back)
    return out


def _unary(x: Tensor, y: np.ndarray, dydx) -> Tensor:
    out = _make(y, x)
    if out.requires_grad:
        def back(g):
            accumulate(x, g * dydx())
        _record((out,), back)
    return out


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _unary(x, y, lambda: 1.0 - y * y)


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _unary(x, y, lambda: y * (1.0 - y))


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0)
    return _unary(x, y, lambda: (x.data > 0).astype(x.data.dtype))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _unary(x, y, lambda: y)


def log(x: Tensor) -> Tensor:
    return _unary(x, np.log(x.data), lambda: 1.0 / x.data)


def square(x: Tensor) -> Tensor:
    return _unary(x, x.data * x.data, lambda: 2.0 * x.data)


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    return _unary(x, y, lambda: 0.5 / y)


def _sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), x)
    if out.requires_grad:
        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            accumulate(x, np.broadcast_to(g, x.data.shape))
        _record((out,), back)
    return out


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.data.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    out = _make(x.data.reshape(shape), x)
    if out.requires_grad:
        def back(g):
            accumulate(x, g.reshape(x.data.shape))
        _record((out,), back)
    return out


def transpose(x: Tensor, axes=None) -> Tensor:
    out = _make(np.transpose(x.data, axes), x)
    if out.requires_grad:
        inv = None if axes is None else np.argsort(axes)
        def back(g):
            accumulate(x, np.transpose(g, inv))
        _record((out,), back)
    return out


def getitem(x: Tensor, idx) -> Tensor:
    out = _make(np.array(x.data[idx]), x)
    if out.requires_grad:
        basic = _is_basic(idx)
        def back(g):
            full = np.zeros_like(x.data)
            if basic:
                full[idx] = g
            else:
                np.add.at(full, idx, g)
            accumulate(x, full)
        _record((out,), back)
    return out


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def take_rows(table: Tensor, index) -> Tensor:
    """Gather rows ``table[index]`` (embedding lookup); index is an int array."""
    index = np.asarray(index)
    out = _make(table.data[index], table)
    if out.requires_grad:
        def back(g):
            full = np.zeros_like(table.data)
            np.add.at(full, index.reshape(-1), g.reshape(-1, *table.data.shape[1:]))
            accumulate(table, full)
        _record((out,), back)
    return out


def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = _make(np.concatenate([t.data for t in tensors], axis=axis), *tensors)
    if out.requires_grad:
        sizes = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]
        def back(g):
            for t, part in zip(tensors, np.split(g, sizes, axis=axis)):
                accumulate(t, part)
        _record((out,), back)
    return out


def stack(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = _make(np.stack([t.data for t in tensors], axis=axis), *tensors)
    if out.requires_grad:
        def back(g):
            for i, t in enumerate(tensors):
                accumulate(t, np.take(g, i, axis=axis))
        _record((out,), back)
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != (b.shape[-2] if b.ndim > 1 else b.shape[0]):
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = _make(np.matmul(a.data, b.data), a, b)
    if out.requires_grad:
        def back(g):
            ad, bd = a.data, b.data
            if a.requires_grad:
                if bd.ndim == 1:
                    ga = np.multiply.outer(g, bd)
                else:
                    ga = np.matmul(g if ad.ndim > 1 else g[..., None, :], np.swapaxes(bd, -1, -2))
                    if ad.ndim == 1:
                        ga = ga[..., 0, :]
                accumulate(a, ga)
            if b.requires_grad:
                if ad.ndim == 1:
                    gb = np.multiply.outer(ad, g) if bd.ndim > 1 else ad * g
                else:
                    gg = g if bd.ndim > 1 else g[..., None]
                    gb = np.matmul(np.swapaxes(ad, -1, -2), gg)
                    if bd.ndim == 1:
                        gb = gb[..., 0]
                accumulate(b, gb)
        _record((out,), back)
    return out


# ---------------------------------------------------------------------------
# normalisation and losses


def softmax(x: Tensor, axis=-1, mask=None) -> Tensor:
    """Numerically stable softmax; ``mask`` (same shape, 0/1) zeroes entries."""
    z = x.data
    if not np.all(np.isfinite(z)):
        raise NumericError("softmax received non-finite input")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not np.all(mask.any(axis=axis)):
            raise NumericError("softmax: a slice is fully masked")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _make(y, x)
    if out.requires_grad:
        def back(g):
            accumulate(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))
        _record((out,), back)
    return out


def log_softmax(x: Tensor, axis=-1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    out = _make(y, x)
    if out.requires_grad:
        def back(g):
            accumulate(x, g - np.exp(y) * g.sum(axis=axis, keepdims=True))
        _record((out,), back)
    return out


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Mean over weighted positions of ``-log softmax(logits)[target]``.

    ``logits`` is ``(..., V)``, ``targets`` an int array of shape ``(...)`` and
    ``weights`` a 0/1 array of the same shape (padding gets 0).
    """
    targets = np.asarray(targets)
    if weights is None:
        weights = np.ones(targets.shape)
    weights = np.asarray(weights, dtype=logits.data.dtype)
    total = weights.sum()
    if total <= 0:
        raise ValueError("cross_entropy: no unmasked targets")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    out = _make(np.asarray(-(picked * weights).sum() / total), logits)
    if out.requires_grad:
        def back(g):
            d = np.exp(logp)
            onehot = np.zeros_like(d)
            np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
            accumulate(logits, g * (d - onehot) * (weights / total)[..., None])
        _record((out,), back)
    return out


def where_mask(x: Tensor, mask) -> Tensor:
    """Multiply by a constant 0/1 mask broadcast against ``x``."""
    return mul(x, Tensor(np.asarray(mask, dtype=x.data.dtype), dtype=x.data.dtype))
