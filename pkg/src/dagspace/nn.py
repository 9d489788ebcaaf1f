"""Small learned components built on the autodiff tape: linear maps, GRU
cells, two-layer MLPs, and the gated-sum aggregator used for message passing.

Weights are initialized uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)],
biases at zero.
"""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor


def _init_matrix(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Module:
    def parameters(self) -> Iterator[Parameter]:
        for value in vars(self).values():
            if isinstance(value, Parameter):
                yield value
            elif isinstance(value, Module):
                yield from value.parameters()

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


class Linear(Module):
    def __init__(self, rng, in_dim: int, out_dim: int, name: str, bias: bool = True):
        self.weight = Parameter(_init_matrix(rng, in_dim, out_dim), f"{name}.weight")
        self.bias = Parameter(np.zeros((1, out_dim)), f"{name}.bias") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight)
        if self.bias is not None:
            y = ad.add(y, self.bias)
        return y


class Mlp2(Module):
    """Two-layer MLP with ReLU; hidden width is twice the input width."""

    def __init__(self, rng, in_dim: int, out_dim: int, name: str):
        hidden = 2 * in_dim
        self.fc1 = Linear(rng, in_dim, hidden, f"{name}.fc1")
        self.fc2 = Linear(rng, hidden, out_dim, f"{name}.fc2")

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.relu(self.fc1(x)))


class GruCell(Module):
    """Single-layer GRU with reset/update/candidate gates.

    The three gate blocks are packed into one input-side and one
    hidden-side matrix so a step costs two matmuls.
    """

    def __init__(self, rng, input_dim: int, hidden_dim: int, name: str):
        self.hidden_dim = hidden_dim
        self.w_x = Parameter(_init_matrix(rng, input_dim, 3 * hidden_dim), f"{name}.w_x")
        self.b_x = Parameter(np.zeros((1, 3 * hidden_dim)), f"{name}.b_x")
        self.w_h = Parameter(_init_matrix(rng, hidden_dim, 3 * hidden_dim), f"{name}.w_h")

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        hd = self.hidden_dim
        xw = ad.add(ad.matmul(x, self.w_x), self.b_x)
        hw = ad.matmul(h, self.w_h)
        r = ad.sigmoid(ad.add(ad.narrow(xw, 1, 0, hd), ad.narrow(hw, 1, 0, hd)))
        z = ad.sigmoid(ad.add(ad.narrow(xw, 1, hd, hd), ad.narrow(hw, 1, hd, hd)))
        n = ad.tanh(ad.add(ad.narrow(xw, 1, 2 * hd, hd), ad.mul(r, ad.narrow(hw, 1, 2 * hd, hd))))
        # h' = z*h + (1-z)*n
        return ad.add(ad.mul(z, h), ad.sub(n, ad.mul(z, n)))


class GatedSum(Module):
    """Order-invariant aggregator: messages are gate(x) * map(x), summed by
    the caller. The gate is a single linear layer with sigmoid, the map a
    linear layer without activation.
    """

    def __init__(self, rng, in_dim: int, out_dim: int, name: str):
        self.gate = Linear(rng, in_dim, out_dim, f"{name}.gate")
        self.map = Linear(rng, in_dim, out_dim, f"{name}.map")

    def message(self, x: Tensor) -> Tensor:
        return ad.mul(ad.sigmoid(self.gate(x)), self.map(x))


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))
