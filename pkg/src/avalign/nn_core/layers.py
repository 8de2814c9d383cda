"""Parameters, a minimal module tree and the standard layers built on it."""
from __future__ import annotations

import numpy as np

from . import functional as F
from .tensor import DimensionError, Tensor, get_dtype, matmul, take_rows

__all__ = [
    "Parameter",
    "Module",
    "ModuleList",
    "Linear",
    "Embedding",
    "LSTMLayer",
    "Conv2d",
    "LayerNorm",
    "BatchNorm",
    "Dropout",
    "Buffer",
    "glorot_uniform",
]


class Parameter(Tensor):
    """A trainable tensor with a name and per-parameter optimiser state."""

    __slots__ = ("state",)

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)
        self.state: dict = {}


class Buffer(Tensor):
    """Non-trainable state that still belongs in checkpoints (running statistics)."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=False, name=name)


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Module:
    """Container whose ``Parameter`` and ``Module`` attributes form a tree."""

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield path, val
            elif isinstance(val, Module):
                yield from val.named_parameters(path + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for key, val in vars(self).items():
            if isinstance(val, Buffer):
                yield f"{prefix}{key}", val
            elif isinstance(val, Module):
                yield from val.named_buffers(f"{prefix}{key}.")

    def named_state(self):
        """Parameters followed by buffers: everything a checkpoint must hold."""
        yield from self.named_parameters()
        yield from self.named_buffers()

    def submodules(self):
        for val in vars(self).values():
            if isinstance(val, Module):
                yield val
                yield from val.submodules()

    def train(self, mode: bool = True):
        """Switch batch statistics and dropout on (training) or off (inference)."""
        for m in [self, *self.submodules()]:
            m.training = mode
        return self

    def reseed(self, key):
        """Give every dropout layer a generator derived from ``key`` and its position."""
        for k, m in enumerate(self.submodules()):
            if isinstance(m, Dropout):
                m.rng = np.random.default_rng([*np.atleast_1d(key), k])

    def assign_names(self):
        for name, p in self.named_parameters():
            p.name = name
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_state()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]):
        own = dict(self.named_state())
        missing = sorted(set(own) - set(arrays))
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {missing[:5]}")
        for name, p in own.items():
            if arrays[name].shape != p.data.shape:
                raise DimensionError(
                    f"{name}: checkpoint shape {arrays[name].shape} != model shape {p.data.shape}"
                )
            p.data = np.array(arrays[name], dtype=p.data.dtype)

    def astype(self, dtype):
        for _, p in self.named_state():
            p.data = p.data.astype(dtype)
        return self

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


class ModuleList(Module):
    def __init__(self, modules):
        for i, m in enumerate(modules):
            setattr(self, str(i), m)
        self._n = len(modules)

    def __len__(self):
        return self._n

    def __getitem__(self, i):
        return getattr(self, str(range(self._n)[i]))

    def __iter__(self):
        return (self[i] for i in range(self._n))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.W = Parameter(glorot_uniform(rng, (d_in, d_out), d_in, d_out))
        self.b = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x):
        y = matmul(x, self.W)
        return y + self.b if self.b is not None else y


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator):
        self.table = Parameter(rng.normal(0.0, 1.0 / np.sqrt(d), size=(n, d)))

    def __call__(self, index):
        return take_rows(self.table, index)


class LSTMLayer(Module):
    """Weights for one LSTM layer acting on ``[x; h]``; forget bias starts at 1."""

    def __init__(self, d_in: int, d_h: int, rng: np.random.Generator):
        self.d_in, self.d_h = d_in, d_h
        self.W = Parameter(glorot_uniform(rng, (d_in + d_h, 4 * d_h), d_in + d_h, d_h))
        b = np.zeros(4 * d_h)
        b[d_h:2 * d_h] = 1.0
        self.b = Parameter(b)

    def cell(self, x, h, c, mask=None):
        return F.lstm_cell(x, h, c, self.W, self.b, mask=mask)

    def __call__(self, x, mask=None, h0=None, c0=None):
        return F.lstm_sequence(x, self.W, self.b, mask=mask, h0=h0, c0=c0)


class Conv2d(Module):
    def __init__(self, k: int, c_in: int, c_out: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, bias: bool = True):
        self.stride, self.padding = stride, padding
        self.kernel = Parameter(glorot_uniform(rng, (k, k, c_in, c_out), k * k * c_in, k * k * c_out))
        self.bias = Parameter(np.zeros(c_out)) if bias else None

    def __call__(self, x):
        y = F.conv2d(x, self.kernel, self.stride, self.padding)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, channels: int, axes=(-3, -2, -1)):
        self.axes = axes
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))

    def __call__(self, x):
        return F.layer_norm(x, self.gamma, self.beta, axes=self.axes)


class BatchNorm(Module):
    """Per-channel normalisation with statistics over every axis but the last.

    Training uses the batch's statistics and folds them into running averages;
    inference uses the running averages.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.momentum, self.eps = momentum, eps
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = Buffer(np.zeros(channels))
        self.running_var = Buffer(np.ones(channels))
        self.training = True

    def __call__(self, x):
        axes = tuple(range(x.ndim - 1))
        if self.training:
            xd = x.data if isinstance(x, Tensor) else np.asarray(x)
            m = self.momentum
            self.running_mean.data = (1 - m) * self.running_mean.data + m * xd.mean(axis=axes)
            self.running_var.data = (1 - m) * self.running_var.data + m * xd.var(axis=axes)
            return F.layer_norm(x, self.gamma, self.beta, axes=axes, eps=self.eps)
        inv = 1.0 / np.sqrt(self.running_var.data + self.eps)
        return (x - self.running_mean.data) * (inv * self.gamma) + self.beta


class Dropout(Module):
    """Inverted dropout; the identity when ``p == 0`` or outside training."""

    def __init__(self, p: float = 0.0, seed: int = 0):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {p}")
        self.p = p
        self.rng = np.random.default_rng(seed)
        self.training = True

    def __call__(self, x):
        if not self.training or self.p == 0.0:
            return x
        keep = (self.rng.random(x.shape) >= self.p) / (1.0 - self.p)
        return x * keep.astype(x.data.dtype)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=get_dtype()))
