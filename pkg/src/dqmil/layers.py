"""Parameter containers: a tiny module base class plus affine, norm and MLP layers."""
from __future__ import annotations

import math

import numpy as np

from . import numerics as nx
from .numerics import Tensor

INIT_STD = 0.02  # None selects U(+-1/sqrt(fan_in))


class Module:
    """Collects trainable tensors from attributes in definition order."""

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters()}

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


class Linear(Module):
    """Affine map ``x @ weight + bias`` with weight stored as (in, out)."""

    def __init__(self, in_features, out_features, rng, bias=True, init_std=INIT_STD):
        if init_std is None:
            bound = 1.0 / math.sqrt(in_features)
            w = rng.uniform(-bound, bound, size=(in_features, out_features))
        else:
            w = nx.trunc_normal((in_features, out_features), rng, std=init_std)
        self.weight = nx.parameter(w)
        self.bias = nx.parameter(np.zeros(out_features)) if bias else None

    def __call__(self, x):
        y = nx.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, dim, eps=nx.LAYER_NORM_EPS):
        self.gain = nx.parameter(np.ones(dim))
        self.bias = nx.parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x):
        return nx.layer_norm(x, self.gain, self.bias, self.eps)


class FeedForward(Module):
    """Linear -> GELU -> Linear."""

    def __init__(self, dim, hidden, out, rng):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, out, rng)

    def __call__(self, x):
        return self.fc2(nx.gelu(self.fc1(x)))
