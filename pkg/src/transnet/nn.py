"""Small layer building blocks on top of :mod:`transnet.autodiff`."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    def parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        for value in vars(self).values():
            if isinstance(value, Tensor) and value.requires_grad:
                params.append(value)
            elif isinstance(value, Module):
                params.extend(value.parameters())
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        params.extend(item.parameters())
        return params

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out.append((key, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(key + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{key}.{i}."))
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


class Linear(Module):
    """Affine map over the last axis of an (..., in) tensor."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, zero: bool = False):
        bound = np.sqrt(6.0 / (n_in + n_out))
        w = np.zeros((n_in, n_out)) if zero else rng.uniform(-bound, bound, size=(n_in, n_out))
        self.weight = ad.parameter(w)
        self.bias = ad.parameter(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight)
        return y + ad.expand(self.bias, y.shape)


class MLP(Module):
    """Stack of Linear layers with ReLU between them (none after the last)."""

    def __init__(self, sizes: list[int], rng: np.random.Generator, zero_last: bool = False):
        n = len(sizes) - 1
        self.layers = [Linear(sizes[i], sizes[i + 1], rng, zero=zero_last and i == n - 1) for i in range(n)]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.relu(x)
        return x


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = ad.parameter(np.ones(dim))
        self.shift = ad.parameter(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.layer_norm(x, eps=1e-6)
        return y * ad.expand(self.gain, y.shape) + ad.expand(self.shift, y.shape)


def state_dict(module: Module) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in module.named_parameters()}


def load_state_dict(module: Module, state: dict[str, np.ndarray]) -> None:
    named = dict(module.named_parameters())
    missing = set(named) - set(state)
    if missing:
        raise KeyError(f"missing parameters: {sorted(missing)}")
    for name, p in named.items():
        value = np.asarray(state[name], dtype=np.float64)
        if value.shape != p.shape:
            raise ad.DimensionError(f"{name}: expected {p.shape}, got {value.shape}")
        p.data[...] = value
