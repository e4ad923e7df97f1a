"""Parameter containers and the small building blocks shared by encoder and decoder."""

from __future__ import annotations

import math

import numpy as np

from . import numerics as nx
from .numerics import Tensor


class Module:
    """Minimal parameter container.

    Parameters are ``Tensor`` attributes with ``requires_grad``; children are
    ``Module`` attributes or lists of modules. A module reachable through
    several attributes (a shared router) is reported once, under its first name.
    """

    training: bool = False

    def named_parameters(self, prefix: str = "", _seen: set | None = None):
        seen = set() if _seen is None else _seen
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                if id(value) not in seen:
                    seen.add(id(value))
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".", seen)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.", seen)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self, _seen: set | None = None):
        seen = set() if _seen is None else _seen
        if id(self) in seen:
            return
        seen.add(id(self))
        yield self
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            children = value if isinstance(value, (list, tuple)) else [value]
            for child in children:
                if isinstance(child, Module):
                    yield from child.modules(seen)

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def param(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 rowwise: bool = False):
        bound = 1.0 / math.sqrt(d_in)
        self.weight = param(rng.uniform(-bound, bound, (d_in, d_out)))
        self.bias = param(np.zeros(d_out)) if bias else None
        self._rowwise = rowwise

    def __call__(self, x: Tensor) -> Tensor:
        return nx.linear(x, self.weight, self.bias, rowwise=self._rowwise)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = param(np.ones(dim))
        self.beta = param(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return nx.layer_norm(x, self.gamma, self.beta)


class FeedForward(Module):
    """Position-wise FFN: linear, swish, dropout, linear.

    Experts use ``rowwise=True`` so a frame's output does not depend on which
    other frames were routed to the same expert.
    """

    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator, dropout: float = 0.1,
                 rowwise: bool = False):
        self.w1 = Linear(d_model, d_ff, rng, rowwise=rowwise)
        self.w2 = Linear(d_ff, d_model, rng, rowwise=rowwise)
        self._dropout = dropout

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        h = nx.swish(self.w1(x))
        h = nx.dropout(h, self._dropout, rng, self.training)
        return self.w2(h)


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, heads: int, rng: np.random.Generator, dropout: float = 0.1):
        self.q = Linear(d_model, d_model, rng)
        self.k = Linear(d_model, d_model, rng)
        self.v = Linear(d_model, d_model, rng)
        self.o = Linear(d_model, d_model, rng)
        self._heads = heads
        self._dropout = dropout

    def __call__(self, query: Tensor, key: Tensor, value: Tensor, mask,
                 rng: np.random.Generator | None = None) -> Tensor:
        ctx = nx.masked_attention(self.q(query), self.k(key), self.v(value), mask, self._heads)
        return self.o(ctx)


def sinusoidal_positions(T: int, d: int, offset: int = 0) -> np.ndarray:
    pos = np.arange(offset, offset + T)[:, None]
    div = np.exp(np.arange(0, d, 2) * (-math.log(10000.0) / d))
    pe = np.zeros((T, d))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div[: d // 2])
    return pe
