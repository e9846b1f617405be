"""Composite blocks: stem, residual basic block, decoder up-block.

Each block is a plain parameter container plus a forward function built from
:mod:`pasnet.tensor` ops. Convolutions that feed a batchnorm carry no bias.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional, Tuple

import numpy as np

from .tensor import (DTYPE, RunningStats, ShapeError, Tensor, add, batchnorm2d, concat_channels,
                     conv2d, maxpool2d, relu, upsample_nearest2x)

Named = Iterator[Tuple[str, Tensor]]


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(DTYPE), requires_grad=True)


def zeros_param(n: int) -> Tensor:
    return Tensor(np.zeros(n, dtype=DTYPE), requires_grad=True)


def ones_param(n: int) -> Tensor:
    return Tensor(np.ones(n, dtype=DTYPE), requires_grad=True)


@dataclass
class ConvBN:
    """k x k convolution (padding k//2, no bias) followed by batchnorm."""

    weight: Tensor
    gamma: Tensor
    beta: Tensor
    stats: RunningStats
    stride: int = 1

    @classmethod
    def create(cls, rng: np.random.Generator, cin: int, cout: int, k: int = 3, stride: int = 1) -> "ConvBN":
        w = kaiming_uniform(rng, (cout, cin, k, k), cin * k * k)
        return cls(w, ones_param(cout), zeros_param(cout), RunningStats.fresh(cout), stride)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: Tensor, training: bool) -> Tensor:
        k = self.weight.shape[2]
        y = conv2d(x, self.weight, None, stride=self.stride, pad=k // 2)
        return batchnorm2d(y, self.gamma, self.beta, self.stats, training)

    def named_parameters(self, prefix: str) -> Named:
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bn.gamma", self.gamma
        yield f"{prefix}.bn.beta", self.beta

    def named_buffers(self, prefix: str) -> Iterator[Tuple[str, np.ndarray]]:
        yield f"{prefix}.bn.running_mean", self.stats.mean
        yield f"{prefix}.bn.running_var", self.stats.var


# ---------------------------------------------------------------------------
# stem


@dataclass
class StemParams:
    conv: ConvBN

    def named_parameters(self, prefix: str = "stem") -> Named:
        yield from self.conv.named_parameters(f"{prefix}.conv")

    def named_buffers(self, prefix: str = "stem"):
        yield from self.conv.named_buffers(f"{prefix}.conv")


def make_stem(rng: np.random.Generator, n_in: int, n_f: int) -> StemParams:
    return StemParams(ConvBN.create(rng, n_in, 2 * n_f, k=3))


def stem_forward(x: Tensor, p: StemParams, training: bool) -> Tensor:
    """conv3x3 -> BN -> relu -> 2x2 maxpool: [N, n_in, H, W] -> [N, 2 n_f, H/2, W/2]."""
    if x.data.ndim != 4 or x.shape[1] != p.conv.in_channels:
        raise ShapeError(f"stem expects [N,{p.conv.in_channels},H,W], got {x.shape}")
    return maxpool2d(relu(p.conv.forward(x, training)))


# ---------------------------------------------------------------------------
# residual basic block


@dataclass
class ResidualBlockParams:
    conv1: ConvBN
    conv2: ConvBN
    shortcut: Optional[ConvBN]
    stride: int

    @property
    def in_channels(self) -> int:
        return self.conv1.in_channels

    @property
    def out_channels(self) -> int:
        return self.conv2.out_channels

    def named_parameters(self, prefix: str) -> Named:
        yield from self.conv1.named_parameters(f"{prefix}.conv1")
        yield from self.conv2.named_parameters(f"{prefix}.conv2")
        if self.shortcut is not None:
            yield from self.shortcut.named_parameters(f"{prefix}.shortcut")

    def named_buffers(self, prefix: str):
        yield from self.conv1.named_buffers(f"{prefix}.conv1")
        yield from self.conv2.named_buffers(f"{prefix}.conv2")
        if self.shortcut is not None:
            yield from self.shortcut.named_buffers(f"{prefix}.shortcut")


def make_residual_block(rng: np.random.Generator, cin: int, cout: int, stride: int) -> ResidualBlockParams:
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    conv1 = ConvBN.create(rng, cin, cout, k=3, stride=stride)
    conv2 = ConvBN.create(rng, cout, cout, k=3)
    shortcut = None
    if cin != cout or stride == 2:
        shortcut = ConvBN.create(rng, cin, cout, k=1, stride=stride)
    return ResidualBlockParams(conv1, conv2, shortcut, stride)


def residual_block_forward(x: Tensor, p: ResidualBlockParams, training: bool) -> Tensor:
    """relu(BN(conv2(relu(BN(conv1(x))))) + shortcut(x))."""
    if x.data.ndim != 4 or x.shape[1] != p.in_channels:
        raise ShapeError(f"residual block expects {p.in_channels} input channels, got shape {x.shape}")
    h = relu(p.conv1.forward(x, training))
    h = p.conv2.forward(h, training)
    s = x if p.shortcut is None else p.shortcut.forward(x, training)
    return relu(add(h, s))


# ---------------------------------------------------------------------------
# decoder up-block


@dataclass
class UpBlockParams:
    conv1: ConvBN
    conv2: ConvBN
    skip_channels: int

    @property
    def in_channels(self) -> int:
        return self.conv1.in_channels - self.skip_channels

    @property
    def out_channels(self) -> int:
        return self.conv2.out_channels

    def named_parameters(self, prefix: str) -> Named:
        yield from self.conv1.named_parameters(f"{prefix}.conv1")
        yield from self.conv2.named_parameters(f"{prefix}.conv2")

    def named_buffers(self, prefix: str):
        yield from self.conv1.named_buffers(f"{prefix}.conv1")
        yield from self.conv2.named_buffers(f"{prefix}.conv2")


def make_up_block(rng: np.random.Generator, cin: int, skip_channels: int, cout: int) -> UpBlockParams:
    conv1 = ConvBN.create(rng, cin + skip_channels, cout, k=3)
    conv2 = ConvBN.create(rng, cout, cout, k=3)
    return UpBlockParams(conv1, conv2, skip_channels)


def up_block_forward(x: Tensor, skip: Tensor, p: UpBlockParams, training: bool) -> Tensor:
    if x.data.ndim != 4 or skip.data.ndim != 4:
        raise ShapeError("up block expects NCHW inputs")
    if x.shape[1] != p.in_channels:
        raise ShapeError(f"up block expects {p.in_channels} input channels, got {x.shape[1]}")
    if skip.shape[1] != p.skip_channels:
        raise ShapeError(f"up block expects {p.skip_channels} skip channels, got {skip.shape[1]}")
    if (2 * x.shape[2], 2 * x.shape[3]) != skip.shape[2:]:
        raise ShapeError(f"up block: upsampled {x.shape[2:]} does not match skip {skip.shape[2:]}")
    h = concat_channels(upsample_nearest2x(x), skip)
    h = relu(p.conv1.forward(h, training))
    return relu(p.conv2.forward(h, training))
