"""Parameter containers shared by the mixers and the backbone."""

from __future__ import annotations

from dataclasses import dataclass, fields, is_dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

INIT_STD = 0.02


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> Tensor:
    """Normal(0, std) truncated to +-2 std by resampling."""
    v = rng.standard_normal(shape)
    bad = np.abs(v) > 2.0
    while bad.any():
        v[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(v) > 2.0
    return Tensor(v * std, requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


@dataclass
class Conv:
    weight: Tensor
    bias: Tensor
    stride: int = 1
    groups: int = 1

    @classmethod
    def init(cls, rng, c_in: int, c_out: int, k: int = 1, stride: int = 1, depthwise: bool = False) -> "Conv":
        if depthwise:
            return cls(trunc_normal(rng, (c_in, 1, k, k)), zeros((c_in,)), stride, c_in)
        return cls(trunc_normal(rng, (c_out, c_in, k, k)), zeros((c_out,)), stride, 1)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, groups=self.groups)


@dataclass
class Norm:
    gain: Tensor
    shift: Tensor | None
    mode: str = "per_sample_all"

    @classmethod
    def init(cls, c: int, mode: str = "per_sample_all", shift: bool = True) -> "Norm":
        return cls(ones((c,)), zeros((c,)) if shift else None, mode)

    def __call__(self, x: Tensor) -> Tensor:
        return T.normalize(x, self.mode, self.gain, self.shift)


@dataclass
class ConvBlock:
    """conv -> normalize -> optional GELU."""

    conv: Conv
    norm: Norm
    act: bool = True

    @classmethod
    def init(cls, rng, c_in: int, c_out: int, k: int = 1, stride: int = 1, depthwise: bool = False, act: bool = True) -> "ConvBlock":
        return cls(Conv.init(rng, c_in, c_out, k, stride, depthwise), Norm.init(c_out), act)

    def __call__(self, x: Tensor) -> Tensor:
        y = self.norm(self.conv(x))
        return T.gelu(y) if self.act else y


def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Depth-first walk over dataclass fields and lists yielding trainable tensors."""
    if isinstance(obj, Tensor):
        if obj.requires_grad:
            yield prefix, obj
    elif is_dataclass(obj):
        for f in fields(obj):
            yield from named_parameters(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_parameters(item, f"{prefix}.{i}" if prefix else str(i))


def parameters(obj) -> list[Tensor]:
    return [p for _, p in named_parameters(obj)]


def count_parameters(obj) -> int:
    return sum(p.size for p in parameters(obj))
