"""Layer building blocks on top of :mod:`drapenet.tensor`."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

LEAKY_SLOPE = 0.1


class Module:
    """Owns Tensors and sub-Modules as attributes (lists of Modules allowed)."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")


def param(data) -> Tensor:
    return Tensor(np.array(data, dtype=T.DTYPE), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, zero: bool = False):
        if zero:
            self.W = param(np.zeros((d_in, d_out)))
        else:
            std = np.sqrt(2.0 / (1.0 + LEAKY_SLOPE ** 2) / d_in)
            self.W = param(rng.normal(0.0, std, size=(d_in, d_out)))
        self.b = param(np.zeros(d_out))

    @property
    def d_in(self):
        return self.W.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.W, self.b)


class MLP(Module):
    """Shared per-row perceptron; leaky ReLU after every layer unless ``last_linear``."""

    def __init__(self, widths, rng, last_linear: bool = False, zero_last: bool = False):
        widths = list(widths)
        if any(w <= 0 for w in widths):
            raise ValueError(f"MLP widths must be positive, got {widths}")
        self.layers = [Linear(a, b, rng, zero=zero_last and i == len(widths) - 2)
                       for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))]
        self.last_linear = last_linear

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if not (self.last_linear and i == len(self.layers) - 1):
                x = T.leaky_relu(x, LEAKY_SLOPE)
        return x
