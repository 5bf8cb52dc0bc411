"""Parameter containers and the small dense blocks shared by the backbone."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad


class Module:
    """Walks attributes in definition order to find parameters and submodules."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, ad.Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, ad.Tensor):
                if val.requires_grad:
                    yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[ad.Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def glorot(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / (n_in + n_out)), size=(n_in, n_out))


class Linear(Module):
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int, bias: bool = True, zero: bool = False):
        w = np.zeros((n_in, n_out)) if zero else glorot(rng, n_in, n_out)
        self.weight = ad.parameter(w)
        self.bias = ad.parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x) -> ad.Tensor:
        return ad.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = ad.parameter(np.ones(d))
        self.beta = ad.parameter(np.zeros(d))

    def __call__(self, x) -> ad.Tensor:
        return ad.layer_norm(ad.as_tensor(x), self.gamma, self.beta)


class FeedForward(Module):
    def __init__(self, rng: np.random.Generator, d: int, hidden: int):
        self.up = Linear(rng, d, hidden)
        self.down = Linear(rng, hidden, d)

    def __call__(self, x) -> ad.Tensor:
        return self.down(ad.gelu(self.up(x)))
