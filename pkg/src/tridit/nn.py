"""Parameter containers over :mod:`tridit.numerics`."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import numerics as nx
from .numerics import Tensor


class Module:
    """Holds parameters and submodules; names follow attribute paths."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


def param(arr: np.ndarray) -> Tensor:
    return Tensor(np.ascontiguousarray(arr, dtype=nx.default_dtype()), requires_grad=True)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True, zero: bool = False):
        std = 0.0 if zero else 1.0 / np.sqrt(d_in)
        self.weight = param(rng.normal(0.0, 1.0, (d_in, d_out)) * std)
        if bias:
            self.bias = param(np.zeros(d_out))
        else:
            self.bias = None

    def __call__(self, x: Tensor) -> Tensor:
        return nx.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.scale = param(np.ones(dim))
        self.shift = param(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return nx.layer_norm(x, self.scale, self.shift)


class Embedding(Module):
    def __init__(self, rng: np.random.Generator, num: int, dim: int, std: float = 0.02):
        self.table = param(rng.normal(0.0, std, (num, dim)))

    def __call__(self, ids) -> Tensor:
        return nx.embedding(self.table, ids)


class MLP(Module):
    def __init__(self, rng: np.random.Generator, dim: int, hidden: int):
        self.norm = LayerNorm(dim)
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(nx.silu(self.fc1(self.norm(x))))
