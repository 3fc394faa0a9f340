"""Layers and the composite blocks built from them.

Modules are plain objects holding :class:`Param` attributes, child modules,
or lists of child modules. Parameter names are derived from attribute paths
(``enc.0.sample.proj.weight``) so checkpoints are stable across runs.
"""

from __future__ import annotations

import math
from typing import Iterator, Tuple

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .tensor import Param, Tensor

FUSION_VARIANTS = ("simple", "single", "double")
MSCONV_KERNELS = (1, 3, 5, 7)


class Module:
    training = True

    def _children(self) -> Iterator[Tuple[str, object]]:
        for key, value in vars(self).items():
            if isinstance(value, (Param, Module)):
                yield key, value
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, item in enumerate(value):
                    yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Param]]:
        for key, value in self._children():
            if isinstance(value, Param):
                yield prefix + key, value
            else:
                yield from value.named_parameters(f"{prefix}{key}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for key, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{key}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def set_training(self, flag: bool) -> None:
        for m in self.modules():
            m.training = flag

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, dtype=np.float32):
        if k % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {k}")
        self.k = k
        self.weight = Param(he_uniform(rng, (cout, cin, k, k), cin * k * k, dtype), "weight")
        self.bias = Param(np.zeros(cout, dtype=dtype), "bias")

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=1, padding=self.k // 2)


class BatchNorm2d(Module):
    def __init__(self, channels: int, dtype=np.float32):
        self.gamma = Param(np.ones(channels, dtype=dtype), "gamma")
        self.beta = Param(np.zeros(channels, dtype=dtype), "beta")
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def named_buffers(self, prefix: str = ""):
        yield prefix + "running_mean", self.running_mean
        yield prefix + "running_var", self.running_var

    def __call__(self, x: Tensor) -> Tensor:
        return ops.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var, self.training)


class Linear(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, dtype=np.float32):
        self.weight = Param(he_uniform(rng, (cout, cin), cin, dtype), "weight")
        self.bias = Param(np.zeros(cout, dtype=dtype), "bias")

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class SENetBlock(Module):
    """Squeeze-and-excitation channel attention."""

    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 16, dtype=np.float32):
        if reduction < 1:
            raise ConfigError(f"reduction must be >= 1, got {reduction}")
        self.channels = channels
        hidden = max(channels // reduction, 1)
        self.squeeze = Linear(channels, hidden, rng, dtype)
        self.excite = Linear(hidden, channels, rng, dtype)

    def attention(self, x: Tensor) -> Tensor:
        """Per-(sample, channel) scale factors in (0, 1), shape (N, C)."""
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise DimensionError(f"SENet built for {self.channels} channels, got input {x.shape}")
        z = ops.flatten(ops.global_avg_pool(x))
        return ops.sigmoid(self.excite(ops.relu(self.squeeze(z))))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.scale_channels(x, self.attention(x))


class FusionBlock(Module):
    """Merge two same-shaped feature maps into one with the same channel count.

    ``simple``: project(concat(a, b))
    ``single``: project(senet(concat(a, b)))
    ``double``: project(concat(senet_a(a), senet_b(b)))
    """

    def __init__(self, channels: int, variant: str, rng: np.random.Generator, reduction: int = 16, dtype=np.float32):
        if variant not in FUSION_VARIANTS:
            raise ConfigError(f"unknown fusion variant {variant!r}; expected one of {FUSION_VARIANTS}")
        self.variant = variant
        self.channels = channels
        if variant == "single":
            self.se = SENetBlock(2 * channels, rng, reduction, dtype)
        elif variant == "double":
            self.se_a = SENetBlock(channels, rng, reduction, dtype)
            self.se_b = SENetBlock(channels, rng, reduction, dtype)
        self.proj = Conv2d(2 * channels, channels, 1, rng, dtype)

    def __call__(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise DimensionError(f"fusion inputs differ: {a.shape} vs {b.shape}")
        if a.shape[1] != self.channels:
            raise DimensionError(f"fusion built for {self.channels} channels, got {a.shape[1]}")
        if self.variant == "simple":
            merged = ops.concat_channels(a, b)
        elif self.variant == "single":
            merged = self.se(ops.concat_channels(a, b))
        else:
            merged = ops.concat_channels(self.se_a(a), self.se_b(b))
        return self.proj(merged)


class MSConvBlock(Module):
    """Parallel 1/3/5/7 branches with 1x1 channel reduction, merged by a 1x1 projection.

    Each branch maps ``in -> out/4`` with a 1x1 conv and, for k > 1, follows it
    with a k x k conv at ``out/4`` channels. Branch outputs are concatenated,
    projected to ``out`` channels, then batch-normalized and rectified.
    """

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, dtype=np.float32):
        if cout % len(MSCONV_KERNELS):
            raise ConfigError(f"MSConvBlock out_channels must be divisible by 4, got {cout}")
        self.cin, self.cout = cin, cout
        width = cout // len(MSCONV_KERNELS)
        self.reduce = [Conv2d(cin, width, 1, rng, dtype) for _ in MSCONV_KERNELS]
        self.branch = [Conv2d(width, width, k, rng, dtype) for k in MSCONV_KERNELS[1:]]
        self.merge = Conv2d(cout, cout, 1, rng, dtype)
        self.bn = BatchNorm2d(cout, dtype)

    def branch_outputs(self, x: Tensor) -> list:
        if x.ndim != 4 or x.shape[1] != self.cin:
            raise DimensionError(f"MSConvBlock built for {self.cin} input channels, got {x.shape}")
        outs = [self.reduce[0](x)]
        for reduce, conv in zip(self.reduce[1:], self.branch):
            outs.append(conv(reduce(x)))
        return outs

    def __call__(self, x: Tensor) -> Tensor:
        outs = self.branch_outputs(x)
        merged = outs[0]
        for o in outs[1:]:
            merged = ops.concat_channels(merged, o)
        return ops.relu(self.bn(self.merge(merged)))


def msconv_param_count(cin: int, cout: int) -> int:
    w = cout // 4
    count = 4 * (cin * w + w)
    count += sum(w * w * k * k + w for k in MSCONV_KERNELS[1:])
    return count + cout * cout + cout + 2 * cout


def naive_multiscale_param_count(cin: int, cout: int) -> int:
    """Parallel full-width k x k convs concatenated then projected, BN after."""
    count = sum(cin * cout * k * k + cout for k in MSCONV_KERNELS)
    return count + 4 * cout * cout + cout + 2 * cout


class ConvBlock(Module):
    """Two rounds of 3x3 conv, batch norm, ReLU."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, dtype=np.float32):
        self.conv1 = Conv2d(cin, cout, 3, rng, dtype)
        self.bn1 = BatchNorm2d(cout, dtype)
        self.conv2 = Conv2d(cout, cout, 3, rng, dtype)
        self.bn2 = BatchNorm2d(cout, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        x = ops.relu(self.bn1(self.conv1(x)))
        return ops.relu(self.bn2(self.conv2(x)))


class UpConv(Module):
    """Nearest-neighbour 2x upsampling, then 3x3 conv, batch norm, ReLU."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, dtype=np.float32):
        self.conv = Conv2d(cin, cout, 3, rng, dtype)
        self.bn = BatchNorm2d(cout, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.relu(self.bn(self.conv(ops.upsample2d(x))))


def make_conv_block(variant: str, cin: int, cout: int, rng: np.random.Generator, dtype=np.float32) -> Module:
    if variant == "msconv":
        return MSConvBlock(cin, cout, rng, dtype)
    if variant == "plain3x3":
        return ConvBlock(cin, cout, rng, dtype)
    raise ConfigError(f"unknown conv variant {variant!r}; expected 'msconv' or 'plain3x3'")
