"""Parameter containers and the handful of layer modules the networks use."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import DTYPE, Tensor


class Parameter(Tensor):
    """A named leaf tensor that always requires a gradient."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name

    def zero_grad(self) -> None:
        self.grad = None


class Module:
    """Base class; parameters and submodules are discovered from attributes."""

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                val.name = name
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=DTYPE)
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    def __init__(self, rng: np.random.Generator, cin: int, cout: int, k: int = 3, stride: int = 1,
                 padding: int | None = None):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = Parameter(kaiming_uniform(rng, (cout, cin, k, k), cin * k * k))
        self.bias = Parameter(np.zeros(cout))

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, fin: int, fout: int, bias: bool = True):
        self.weight = Parameter(kaiming_uniform(rng, (fout, fin), fin))
        self.bias = Parameter(np.zeros(fout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    """Layer norm over the trailing axes; per-channel affine for feature maps."""

    def __init__(self, shape: tuple[int, ...], n_axes: int | None = None):
        self.n_axes = len(shape) if n_axes is None else n_axes
        self.gamma = Parameter(np.ones(shape))
        self.beta = Parameter(np.zeros(shape))

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.n_axes, self.gamma, self.beta)


class ConvBlock(Module):
    """conv3x3 -> layer norm -> relu, optionally followed by k×k max pooling."""

    def __init__(self, rng: np.random.Generator, cin: int, cout: int, pool: int = 1):
        self.conv = Conv2d(rng, cin, cout, 3)
        self.norm = LayerNorm((cout, 1, 1), n_axes=3)
        self.pool = pool

    def forward(self, x: Tensor) -> Tensor:
        y = F.relu(self.norm(self.conv(x)))
        return F.max_pool2d(y, self.pool) if self.pool > 1 else y
