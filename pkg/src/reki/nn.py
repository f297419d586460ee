"""Linear layers and MLP stacks on top of the tape primitives."""

from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from . import tensor as T


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear:
    """y = x @ w + b with b as a (1, out) row bias."""

    def __init__(self, w: T.Tensor, b: T.Tensor):
        self.w = w
        self.b = b

    @classmethod
    def init(cls, rng: np.random.Generator, fan_in: int, fan_out: int) -> "Linear":
        return cls(T.param(xavier_uniform(rng, fan_in, fan_out)),
                   T.param(np.zeros((1, fan_out))))

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.add(T.matmul(x, self.w), self.b)

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, T.Tensor]]:
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b

    def load(self, values: dict[str, np.ndarray], prefix: str) -> None:
        self.w.data = values[f"{prefix}.w"].copy()
        self.b.data = values[f"{prefix}.b"].copy()


class Mlp:
    """Linear stack with ReLU between layers and a linear final layer.

    `hidden=()` degenerates to a single linear map.
    """

    def __init__(self, layers: list[Linear]):
        self.layers = layers

    @classmethod
    def init(cls, rng: np.random.Generator, in_dim: int, hidden: Sequence[int],
             out_dim: int) -> "Mlp":
        dims = [in_dim, *hidden, out_dim]
        return cls([Linear.init(rng, dims[i], dims[i + 1]) for i in range(len(dims) - 1)])

    def __call__(self, x: T.Tensor) -> T.Tensor:
        out = x
        for i, layer in enumerate(self.layers):
            out = layer(out)
            if i < len(self.layers) - 1:
                out = T.relu(out)
        return out

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, T.Tensor]]:
        for j, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}.layer{j}")

    def load(self, values: dict[str, np.ndarray], prefix: str) -> None:
        for j, layer in enumerate(self.layers):
            layer.load(values, f"{prefix}.layer{j}")
