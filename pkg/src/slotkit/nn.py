"""Parameterized layers on top of the tensor engine.

Modules register parameters and children through attribute assignment,
torch-style, so whole models can be walked for checkpointing. Parameter
initialization draws from explicit `Rng` streams; building the same module
from the same stream is bit-reproducible.
"""

from __future__ import annotations

import math

import numpy as np

from .rng import Rng
from . import tensor as tt
from .tensor import Tensor, ContractError


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=tt.default_dtype()), requires_grad=True)


def uniform_init(rng: Rng, shape, bound) -> Tensor:
    return parameter(rng.uniform(-bound, bound, shape))


def fan_in_init(rng: Rng, shape, fan_in) -> Tensor:
    # torch-style kaiming-uniform default for linear/conv weights
    return uniform_init(rng, shape, 1.0 / math.sqrt(fan_in))


def xavier_init(rng: Rng, shape, fan_in, fan_out) -> Tensor:
    return uniform_init(rng, shape, math.sqrt(6.0 / (fan_in + fan_out)))


class Module:
    """Base class tracking parameters and submodules by attribute name."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        params = self.__dict__.get("_params")
        children = self.__dict__.get("_children")
        if params is None:
            raise ContractError("Module.__init__ must run before assigning attributes")
        params.pop(name, None)
        children.pop(name, None)
        if isinstance(value, Tensor) and value.requires_grad:
            params[name] = value
        elif isinstance(value, (Module, ModuleList)):
            children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield (prefix + name, p)
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + "/")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state(self, entries: dict, prefix=""):
        for name, p in self.named_parameters(prefix):
            if name not in entries:
                raise ContractError(f"checkpoint missing parameter {name!r}")
            arr = np.asarray(entries[name])
            if tuple(arr.shape) != tuple(p.data.shape):
                raise ContractError(
                    f"shape mismatch for {name!r}: checkpoint {arr.shape}, model {p.data.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    def param_count(self):
        return sum(p.size for p in self.parameters())


class ModuleList:
    """Ordered container of submodules addressable by index."""

    def __init__(self, modules=()):
        self.modules = list(modules)

    def append(self, m):
        self.modules.append(m)

    def __iter__(self):
        return iter(self.modules)

    def __len__(self):
        return len(self.modules)

    def __getitem__(self, i):
        return self.modules[i]

    def named_parameters(self, prefix=""):
        for i, m in enumerate(self.modules):
            yield from m.named_parameters(f"{prefix}{i}/")


class Linear(Module):
    def __init__(self, d_in, d_out, rng: Rng, bias=True, zero_init=False):
        super().__init__()
        if zero_init:
            self.w = parameter(np.zeros((d_in, d_out)))
        else:
            self.w = fan_in_init(rng, (d_in, d_out), d_in)
        self.b = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x):
        y = tt.matmul(x, self.w)
        return y + self.b if self.b is not None else y


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, rng: Rng, stride=1, pad=0, bias=True, zero_init=False):
        super().__init__()
        self.stride, self.pad = stride, pad
        fan_in = c_in * k * k
        if zero_init:
            self.w = parameter(np.zeros((c_out, c_in, k, k)))
            self.b = parameter(np.zeros(c_out)) if bias else None
        else:
            self.w = fan_in_init(rng, (c_out, c_in, k, k), fan_in)
            self.b = uniform_init(rng, (c_out,), 1.0 / math.sqrt(fan_in)) if bias else None

    def __call__(self, x):
        return tt.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class ConvTranspose2d(Module):
    def __init__(self, c_in, c_out, k, rng: Rng, stride=1, pad=0, out_pad=0, bias=True):
        super().__init__()
        self.stride, self.pad, self.out_pad = stride, pad, out_pad
        fan_in = c_in * k * k
        self.w = fan_in_init(rng, (c_in, c_out, k, k), fan_in)
        self.b = uniform_init(rng, (c_out,), 1.0 / math.sqrt(fan_in)) if bias else None

    def __call__(self, x):
        return tt.conv_transpose2d(x, self.w, self.b, stride=self.stride,
                                   pad=self.pad, out_pad=self.out_pad)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.w = parameter(np.ones(dim))
        self.b = parameter(np.zeros(dim))

    def __call__(self, x):
        return tt.layer_norm(x, self.w, self.b, eps=self.eps)


class GroupNorm(Module):
    def __init__(self, groups, channels, eps=1e-5):
        super().__init__()
        self.groups, self.eps = groups, eps
        self.w = parameter(np.ones(channels))
        self.b = parameter(np.zeros(channels))

    def __call__(self, x):
        return tt.group_norm(x, self.w, self.b, self.groups, eps=self.eps)


class GRUCell(Module):
    """Gated recurrent update; gate order (reset, update, candidate)."""

    def __init__(self, d_in, d_hidden, rng: Rng):
        super().__init__()
        self.d_hidden = d_hidden
        bound = 1.0 / math.sqrt(d_hidden)
        self.w_ih = uniform_init(rng, (d_in, 3 * d_hidden), bound)
        self.w_hh = uniform_init(rng, (d_hidden, 3 * d_hidden), bound)
        self.b_ih = parameter(np.zeros(3 * d_hidden))
        self.b_hh = parameter(np.zeros(3 * d_hidden))

    def __call__(self, x, h):
        d = self.d_hidden
        gi = tt.matmul(x, self.w_ih) + self.b_ih
        gh = tt.matmul(h, self.w_hh) + self.b_hh
        r = tt.sigmoid(gi[..., :d] + gh[..., :d])
        z = tt.sigmoid(gi[..., d:2 * d] + gh[..., d:2 * d])
        n = tt.tanh(gi[..., 2 * d:] + r * gh[..., 2 * d:])
        return (1.0 - z) * n + z * h


class Mlp(Module):
    """Two-layer perceptron with ReLU, optionally zero-initialized output."""

    def __init__(self, d_in, d_hidden, d_out, rng: Rng, zero_out=False):
        super().__init__()
        self.fc1 = Linear(d_in, d_hidden, rng.stream(0))
        self.fc2 = Linear(d_hidden, d_out, rng.stream(1), zero_init=zero_out)

    def __call__(self, x):
        return self.fc2(tt.relu(self.fc1(x)))


class Sequential(Module):
    def __init__(self, *layers):
        super().__init__()
        self.layers = ModuleList(layers)

    def __call__(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class Activation(Module):
    def __init__(self, fn):
        super().__init__()
        self.fn = fn

    def __call__(self, x):
        return self.fn(x)
