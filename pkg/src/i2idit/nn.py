"""Minimal module/parameter containers."""

import math
from collections import OrderedDict

import numpy as np

from . import tensor as T
from .errors import DimensionError, VersionError
from .tensor import Tensor


class Module:
    """Parameters are Tensor attributes with ``requires_grad``; submodules nest.

    Traversal follows attribute assignment order, so names and ordering are
    a pure function of the constructor.
    """

    def named_parameters(self, prefix="", include_frozen=False):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and (val.requires_grad or include_frozen):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".", include_frozen)
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.", include_frozen)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def state_dict(self):
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = [n for n in own if n not in state]
        unknown = [n for n in state if n not in own]
        if missing or unknown:
            raise VersionError(f"parameter names differ: missing {missing[:5]}, unknown {unknown[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"parameter {name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data[...] = arr

    def weights(self):
        """Every tensor, trainable or frozen, by name."""
        return OrderedDict(self.named_parameters(include_frozen=True))

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
        return self


def uniform_init(rng, fan_in, shape):
    bound = math.sqrt(3.0 / fan_in)
    return rng.uniform(shape, -bound, bound)


class Linear(Module):
    def __init__(self, d_in, d_out, rng=None, zero=False, bias=True):
        if zero or rng is None:
            w = np.zeros((d_in, d_out))
        else:
            w = uniform_init(rng, d_in, (d_in, d_out))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None
        self.d_in = d_in
        self.d_out = d_out

    def __call__(self, x):
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"Linear expects last axis {self.d_in}, got shape {x.shape}")
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class MLP(Module):
    def __init__(self, d_in, d_hidden, d_out, rng, act="gelu"):
        self.fc1 = Linear(d_in, d_hidden, rng.split("fc1"))
        self.fc2 = Linear(d_hidden, d_out, rng.split("fc2"))
        self.act = act

    def __call__(self, x):
        h = self.fc1(x)
        h = T.gelu(h) if self.act == "gelu" else T.silu(h)
        return self.fc2(h)


def random_linear(d_in, d_out, rng):
    """Linear layer with random weights and random bias, for frozen feature maps."""
    lin = Linear(d_in, d_out, rng.split("w"))
    lin.bias.data[...] = rng.split("b").uniform((d_out,), -0.5, 0.5)
    return lin
