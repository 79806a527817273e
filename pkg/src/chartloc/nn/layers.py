"""Parameters, a tiny module container, and the dense/conv building blocks."""

from __future__ import annotations

import hashlib
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Module:
    """Holds named parameters and child modules; names are dotted paths."""

    def parameters(self) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for p in self._walk():
            if p.name in out:
                raise ValueError(f"duplicate parameter name {p.name!r}")
            out[p.name] = p
        return out

    def _walk(self) -> Iterator[Parameter]:
        for value in vars(self).values():
            if isinstance(value, Parameter):
                yield value
            elif isinstance(value, Module):
                yield from value._walk()
            elif isinstance(value, (list, tuple)):
                for v in value:
                    if isinstance(v, Module):
                        yield from v._walk()
                    elif isinstance(v, Parameter):
                        yield v

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

    def fingerprint(self) -> str:
        """sha256 over parameter names and raw bytes, in name order."""
        h = hashlib.sha256()
        for name, p in sorted(self.parameters().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


class Dense(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, name: str, bias: bool = True):
        self.weight = Parameter(glorot_uniform(rng, (fan_in, fan_out), fan_in, fan_out), f"{name}.weight")
        self.bias = Parameter(np.zeros(fan_out), f"{name}.bias") if bias else None

    def __call__(self, x) -> Tensor:
        y = T.matmul(x, self.weight)
        return T.add(y, self.bias) if self.bias is not None else y


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, name: str,
                 kernel: int = 3, stride: int = 2, padding: int = 1):
        fan_in, fan_out = c_in * kernel * kernel, c_out * kernel * kernel
        self.weight = Parameter(glorot_uniform(rng, (c_out, c_in, kernel, kernel), fan_in, fan_out),
                                f"{name}.weight")
        self.bias = Parameter(np.zeros(c_out), f"{name}.bias")
        self.stride = stride
        self.padding = padding

    def __call__(self, x) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        k = self.weight.shape[-1]
        return ((h + 2 * self.padding - k) // self.stride + 1,
                (w + 2 * self.padding - k) // self.stride + 1)
