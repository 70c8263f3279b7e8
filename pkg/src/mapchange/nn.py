"""Parameterized layers on top of :mod:`mapchange.tensor`."""

from __future__ import annotations

import zlib
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


class Module:
    """Container that discovers Parameters and sub-Modules through its attributes."""

    def _children(self) -> Iterator[object]:
        for value in vars(self).values():
            if isinstance(value, (list, tuple)):
                yield from value
            else:
                yield value

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        seen: set[int] = set()
        stack = [self]
        # depth-first in attribute order; shared submodules appear once
        while stack:
            mod = stack.pop()
            children = []
            for child in mod._children():
                if isinstance(child, Parameter) and id(child) not in seen:
                    seen.add(id(child))
                    out.append(child)
                elif isinstance(child, Module):
                    children.append(child)
            stack.extend(reversed(children))
        return out

    def named_parameters(self) -> dict[str, Parameter]:
        named: dict[str, Parameter] = {}
        for p in self.parameters():
            if p.name in named:
                raise ValueError(f"duplicate parameter name {p.name!r}")
            named[p.name] = p
        return named

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Per-parameter stream so that a parameter's init does not depend on its neighbours."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def initialize(module: Module, seed: int) -> None:
    """Fan-in scaled normal init for weights (gain 2 for relu-fed layers), zero biases, unit gains."""
    for p in module.parameters():
        if p.init == "zeros":
            p.data = np.zeros(p.shape)
        elif p.init == "ones":
            p.data = np.ones(p.shape)
        elif p.init in ("kaiming", "lecun"):
            gain = 2.0 if p.init == "kaiming" else 1.0
            p.data = param_rng(seed, p.name).standard_normal(p.shape) * np.sqrt(gain / p.fan_in)
        else:
            raise ValueError(f"unknown init {p.init!r} for {p.name}")
        p.zero_grad()


class Conv2d(Module):
    def __init__(self, name: str, c_in: int, c_out: int, k: int = 3, stride: int = 1, init: str = "kaiming"):
        self.stride = stride
        self.pad = k // 2
        self.weight = Parameter(f"{name}.weight", (c_out, c_in, k, k), init=init, fan_in=c_in * k * k)
        self.bias = Parameter(f"{name}.bias", (c_out,))

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class GroupNorm(Module):
    def __init__(self, name: str, channels: int, groups: int | None = None, eps: float = 1e-5):
        # largest divisor of the channel count that is at most 8
        self.groups = groups or max(g for g in range(1, 9) if channels % g == 0)
        self.eps = eps
        self.gamma = Parameter(f"{name}.gamma", (channels,), init="ones")
        self.beta = Parameter(f"{name}.beta", (channels,))

    def __call__(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self.groups, self.gamma, self.beta, self.eps)


class LayerNorm(Module):
    def __init__(self, name: str, dim: int, eps: float = 1e-5):
        self.eps = eps
        self.gamma = Parameter(f"{name}.gamma", (dim,), init="ones")
        self.beta = Parameter(f"{name}.beta", (dim,))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class Linear(Module):
    """Token-wise affine map on the last axis."""

    def __init__(self, name: str, d_in: int, d_out: int, init: str = "lecun"):
        self.weight = Parameter(f"{name}.weight", (d_in, d_out), init=init, fan_in=d_in)
        self.bias = Parameter(f"{name}.bias", (d_out,))

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.weight), self.bias)


class ConvNormReLU(Module):
    def __init__(self, name: str, c_in: int, c_out: int, stride: int = 1):
        self.conv = Conv2d(f"{name}.conv", c_in, c_out, 3, stride)
        self.norm = GroupNorm(f"{name}.gn", c_out)

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(self.norm(self.conv(x)))
