"""Neural building blocks on top of the autodiff tensor.

Conv2d, BatchNorm2d, Linear, the residual basic/bottleneck blocks and the
VGG-style Conv-BN-ReLU unit. Layers are plain objects holding parameter
tensors; ``forward`` takes an explicit mode ("train"/"eval"). Eval-mode
forward is pure; train-mode batch norm mutates its running buffers and is
single-writer.
"""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from .tensor import (
    DEFAULT_DTYPE,
    ShapeError,
    Tensor,
    batch_norm2d_train,
    conv2d,
    matmul,
    max_pool2d,
)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _check_mode(mode: str) -> None:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


def kaiming_normal(rng: np.random.Generator, shape, fan_out: int, dtype) -> np.ndarray:
    std = math.sqrt(2.0 / fan_out)
    return rng.normal(0.0, std, size=shape).astype(dtype)


class Conv2d:
    """2-D convolution layer, Kaiming-normal (fan-out) initialised."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 stride: int = 1, padding: int = 0, bias: bool = False,
                 rng: Optional[np.random.Generator] = None, dtype=DEFAULT_DTYPE):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        fan_out = kernel * kernel * out_channels
        self.weight = Tensor(
            kaiming_normal(rng, (out_channels, in_channels, kernel, kernel), fan_out, dtype),
            requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = conv2d(x, self.weight, stride=self.stride, padding=self.padding)
        if self.bias is not None:
            y = y + self.bias.reshape(1, self.out_channels, 1, 1)
        return y

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        yield prefix + "weight", self.weight
        if self.bias is not None:
            yield prefix + "bias", self.bias

    def named_buffers(self, prefix: str = "") -> Iterator[tuple]:
        return iter(())


class BatchNorm2d:
    """Per-channel batch normalization with running statistics.

    Train mode normalizes with the current batch's population statistics and
    folds them into the running buffers as
    ``running <- (1 - momentum) * running + momentum * batch``. Eval mode is
    a fixed affine map of the running buffers.

    ``stats_cache`` (a per-step dict) lets a caller replay a layer on a
    second input while reusing the batch statistics recorded by the first
    pass; the replay treats them as constants and leaves the running buffers
    alone. Used when several weight-sharing nets execute the same block in
    one training step.
    """

    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS,
                 dtype=DEFAULT_DTYPE):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x: Tensor, mode: str, stats_cache: Optional[dict] = None) -> Tensor:
        _check_mode(mode)
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"batchnorm: expected N×{self.channels}×H×W input, got {x.shape}")
        if mode == "eval":
            return self._norm_with_constants(x, self.running_mean, self.running_var)

        cached = stats_cache.get(id(self)) if stats_cache is not None else None
        if cached is not None:
            return self._norm_with_constants(x, cached[0], cached[1])

        if x.shape[0] < 2:
            raise ShapeError(f"batchnorm: train mode needs batch size >= 2, got {x.shape[0]}")
        y, batch_mean, batch_var = batch_norm2d_train(x, self.gamma, self.beta, self.eps)
        self.running_mean += self.momentum * (batch_mean - self.running_mean)
        self.running_var += self.momentum * (batch_var - self.running_var)
        if stats_cache is not None:
            stats_cache[id(self)] = (batch_mean, batch_var)
        return y

    def _norm_with_constants(self, x: Tensor, mean: np.ndarray, var: np.ndarray) -> Tensor:
        c = self.channels
        inv_std = Tensor(1.0 / np.sqrt(var + self.eps), dtype=x.dtype)
        scale = (self.gamma * inv_std).reshape(1, c, 1, 1)
        shift = (self.beta - self.gamma * inv_std * Tensor(mean, dtype=x.dtype)).reshape(1, c, 1, 1)
        return x * scale + shift

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        yield prefix + "gamma", self.gamma
        yield prefix + "beta", self.beta

    def named_buffers(self, prefix: str = "") -> Iterator[tuple]:
        yield prefix + "running_mean", self.running_mean
        yield prefix + "running_var", self.running_var


class Linear:
    """Fully-connected classifier head, U(-1/sqrt(fan_in), +) initialised."""

    def __init__(self, in_features: int, out_features: int,
                 rng: Optional[np.random.Generator] = None, dtype=DEFAULT_DTYPE):
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / math.sqrt(in_features)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(rng.uniform(-bound, bound, size=(out_features, in_features)).astype(dtype),
                             requires_grad=True)
        self.bias = Tensor(rng.uniform(-bound, bound, size=out_features).astype(dtype),
                           requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight, transpose_b=True) + self.bias

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        yield prefix + "weight", self.weight
        yield prefix + "bias", self.bias

    def named_buffers(self, prefix: str = "") -> Iterator[tuple]:
        return iter(())


def global_avg_pool(x: Tensor) -> Tensor:
    """N×C×H×W -> N×C mean over spatial positions."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: need 4-D input, got {x.shape}")
    return x.mean(axes=(2, 3))


class ResidualBlock:
    """Basic (two 3x3) or bottleneck (1x1, 3x3, 1x1) residual block.

    The bottleneck expands ``width`` 4x on its output; downsampling lives on
    the 3x3 conv. When stride > 1 or the channel count changes, the shortcut
    is a strided 1x1 projection with its own BN. ``variant`` picks the
    original post-activation ordering or the pre-activation one.
    """

    BOTTLENECK_EXPANSION = 4

    def __init__(self, kind: str, in_channels: int, width: int, stride: int = 1,
                 variant: str = "post", rng: Optional[np.random.Generator] = None,
                 dtype=DEFAULT_DTYPE):
        if kind not in ("basic", "bottleneck"):
            raise ValueError(f"unknown block kind {kind!r}")
        if variant not in ("post", "pre"):
            raise ValueError(f"unknown block variant {variant!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.kind = kind
        self.variant = variant
        self.stride = stride
        self.in_channels = in_channels
        self.out_channels = width if kind == "basic" else width * self.BOTTLENECK_EXPANSION

        if kind == "basic":
            self.conv1 = Conv2d(in_channels, width, 3, stride=stride, padding=1, rng=rng, dtype=dtype)
            self.conv2 = Conv2d(width, width, 3, stride=1, padding=1, rng=rng, dtype=dtype)
            if variant == "post":
                bn_channels = (width, width)
            else:
                bn_channels = (in_channels, width)
            self.bn1 = BatchNorm2d(bn_channels[0], dtype=dtype)
            self.bn2 = BatchNorm2d(bn_channels[1], dtype=dtype)
            self.conv3 = None
            self.bn3 = None
        else:
            out = self.out_channels
            self.conv1 = Conv2d(in_channels, width, 1, stride=1, padding=0, rng=rng, dtype=dtype)
            self.conv2 = Conv2d(width, width, 3, stride=stride, padding=1, rng=rng, dtype=dtype)
            self.conv3 = Conv2d(width, out, 1, stride=1, padding=0, rng=rng, dtype=dtype)
            if variant == "post":
                bn_channels = (width, width, out)
            else:
                bn_channels = (in_channels, width, width)
            self.bn1 = BatchNorm2d(bn_channels[0], dtype=dtype)
            self.bn2 = BatchNorm2d(bn_channels[1], dtype=dtype)
            self.bn3 = BatchNorm2d(bn_channels[2], dtype=dtype)

        if stride != 1 or in_channels != self.out_channels:
            self.down_conv = Conv2d(in_channels, self.out_channels, 1, stride=stride,
                                    padding=0, rng=rng, dtype=dtype)
            self.down_bn = BatchNorm2d(self.out_channels, dtype=dtype)
        else:
            self.down_conv = None
            self.down_bn = None

    def forward(self, x: Tensor, mode: str, stats_cache: Optional[dict] = None) -> Tensor:
        _check_mode(mode)
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"residual block: expected N×{self.in_channels}×H×W input, got {x.shape}")
        if self.variant == "post":
            return self._forward_post(x, mode, stats_cache)
        return self._forward_pre(x, mode, stats_cache)

    def _shortcut(self, x: Tensor, mode: str, cache) -> Tensor:
        if self.down_conv is None:
            return x
        return self.down_bn.forward(self.down_conv.forward(x), mode, cache)

    def _forward_post(self, x, mode, cache):
        h = self.bn1.forward(self.conv1.forward(x), mode, cache).relu()
        if self.kind == "basic":
            h = self.bn2.forward(self.conv2.forward(h), mode, cache)
        else:
            h = self.bn2.forward(self.conv2.forward(h), mode, cache).relu()
            h = self.bn3.forward(self.conv3.forward(h), mode, cache)
        return (h + self._shortcut(x, mode, cache)).relu()

    def _forward_pre(self, x, mode, cache):
        a = self.bn1.forward(x, mode, cache).relu()
        h = self.conv1.forward(a)
        if self.kind == "basic":
            h = self.conv2.forward(self.bn2.forward(h, mode, cache).relu())
        else:
            h = self.conv2.forward(self.bn2.forward(h, mode, cache).relu())
            h = self.conv3.forward(self.bn3.forward(h, mode, cache).relu())
        s = x if self.down_conv is None else self._shortcut(a, mode, cache)
        return h + s

    def _sublayers(self):
        pairs = [("conv1.", self.conv1), ("bn1.", self.bn1),
                 ("conv2.", self.conv2), ("bn2.", self.bn2)]
        if self.conv3 is not None:
            pairs += [("conv3.", self.conv3), ("bn3.", self.bn3)]
        if self.down_conv is not None:
            pairs += [("down.conv.", self.down_conv), ("down.bn.", self.down_bn)]
        return pairs

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for sub_prefix, layer in self._sublayers():
            yield from layer.named_parameters(prefix + sub_prefix)

    def named_buffers(self, prefix: str = "") -> Iterator[tuple]:
        for sub_prefix, layer in self._sublayers():
            yield from layer.named_buffers(prefix + sub_prefix)


class ConvBnRelu:
    """VGG-style [Conv-BN-ReLU] unit (3x3, padding 1)."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1,
                 rng: Optional[np.random.Generator] = None, dtype=DEFAULT_DTYPE):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.conv = Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(out_channels, dtype=dtype)

    def forward(self, x: Tensor, mode: str, stats_cache: Optional[dict] = None) -> Tensor:
        return self.bn.forward(self.conv.forward(x), mode, stats_cache).relu()

    def named_parameters(self, prefix: str = ""):
        yield from self.conv.named_parameters(prefix + "conv.")
        yield from self.bn.named_parameters(prefix + "bn.")

    def named_buffers(self, prefix: str = ""):
        yield from self.conv.named_buffers(prefix + "conv.")
        yield from self.bn.named_buffers(prefix + "bn.")


__all__ = [
    "BN_EPS", "BN_MOMENTUM", "BatchNorm2d", "Conv2d", "ConvBnRelu", "Linear",
    "ResidualBlock", "global_avg_pool", "kaiming_normal", "max_pool2d",
]
