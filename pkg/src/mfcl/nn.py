"""Parameter containers and the small set of layers the networks are built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .autodiff import Tensor
from .autodiff import functional as F


class Parameter(Tensor):
    """Learnable leaf tensor. Its dotted path is assigned by the owning module tree."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(np.array(data, copy=True), requires_grad=True, name=name)


class Module:
    """Attribute-walking parameter registry (no hooks, no device handling)."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def assign_names(self, prefix: str = "") -> None:
        for path, p in self.named_parameters(prefix):
            p.name = path

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        if missing:
            raise KeyError(f"missing parameters: {missing[:5]}{'...' if len(missing) > 5 else ''}")
        for name, p in own.items():
            arr = state[name]
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = np.array(arr, dtype=p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, k: int,
                 stride: int = 1, pad: int | None = None, bias: bool = True, dtype=np.float64):
        self.stride = stride
        self.pad = (k - 1) // 2 if pad is None else pad
        self.k = k
        self.weight = Parameter(kaiming_uniform(rng, (c_out, c_in, k, k), c_in * k * k, dtype))
        self.bias = Parameter(np.zeros(c_out, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class Linear(Module):
    """Dense layer on (N, in) inputs."""

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, dtype=np.float64):
        self.weight = Parameter(kaiming_uniform(rng, (c_in, c_out), c_in, dtype))
        self.bias = Parameter(np.zeros((1, c_out), dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.matmul(x, self.weight) + self.bias
