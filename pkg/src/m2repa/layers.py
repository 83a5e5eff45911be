"""Parameter containers built on numcore tensors."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import numcore as nc
from .numcore import Tensor


class Module:
    """Walks attributes in definition order to collect named parameters."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for k, p in own.items():
            if k not in state:
                continue
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"parameter {k}: expected shape {p.shape}, found {arr.shape}")
            p.data = np.ascontiguousarray(arr.astype(p.dtype))

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


def _param(arr: np.ndarray, name: str | None = None, trainable: bool = True) -> Tensor:
    return Tensor(arr, requires_grad=trainable, name=name)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, init: str = "xavier",
                 bias: bool = True, trainable: bool = True):
        if init == "zero":
            w = np.zeros((d_in, d_out))
        elif init == "small":
            w = rng.normal(0.0, 0.02, size=(d_in, d_out))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / (d_in + d_out)), size=(d_in, d_out))
        self.weight = _param(w, trainable=trainable)
        self.bias = _param(np.zeros(d_out), trainable=trainable) if bias else None

    def __call__(self, x):
        y = nc.matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm(Module):
    def __init__(self, d: int):
        self.weight = _param(np.ones(d))
        self.bias = _param(np.zeros(d))

    def __call__(self, x):
        return nc.layer_norm(x, self.weight, self.bias)


class MLP(Module):
    """Stack of Linear layers with SiLU between them (none after the last)."""

    def __init__(self, dims: list[int], rng: np.random.Generator, last_init: str = "xavier"):
        if len(dims) < 2:
            raise ValueError("MLP needs at least an input and an output width")
        n = len(dims) - 1
        self.layers = [
            Linear(dims[i], dims[i + 1], rng, init=last_init if i == n - 1 else "xavier")
            for i in range(n)
        ]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = nc.silu(x)
        return x
