"""Channel and spatial attention gates (CBAM) with exact backwards.

Channel gate: ``M_c = sigmoid(MLP(avgpool(F)) + MLP(maxpool(F)))`` where
the pools reduce the spatial grid per channel and the shared two-layer
MLP is ``W1 @ relu(W0 @ x)`` (no biases, hidden width C/r).

Spatial gate: channel-wise average and maximum maps are concatenated into
two channels and passed through a k x k convolution (padding (k-1)/2) and
a sigmoid.

Gates multiply the feature map channel-first, then spatially.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ShapeError
from .rng import Rng
from .tensor import Parameter, Tensor


@dataclass
class CbamConfig:
    channels: int
    reduction_ratio: int = 8
    spatial_kernel: int = 7

    def __post_init__(self):
        if self.channels < 1 or self.reduction_ratio < 1:
            raise ShapeError("channels and reduction_ratio must be positive")
        if self.channels % self.reduction_ratio != 0:
            raise ShapeError(
                f"reduction_ratio {self.reduction_ratio} must divide channels {self.channels}"
            )
        if self.spatial_kernel % 2 != 1:
            raise ShapeError(f"spatial_kernel must be odd, got {self.spatial_kernel}")


class CbamParams:
    """W0: [C/r, C], W1: [C, C/r], spatial conv: [1, 2, k, k] plus bias."""

    def __init__(self, config: CbamConfig, w0, w1, conv_w, conv_b):
        self.config = config
        c, r, k = config.channels, config.reduction_ratio, config.spatial_kernel
        hidden = c // r
        if w0.shape != (hidden, c) or w1.shape != (c, hidden):
            raise ShapeError(
                f"MLP shapes {w0.shape}/{w1.shape} do not match C={c}, C/r={hidden}"
            )
        if conv_w.shape != (1, 2, k, k) or conv_b.shape != (1,):
            raise ShapeError(f"spatial conv shape {conv_w.shape} must be (1, 2, {k}, {k})")
        self.w0 = w0
        self.w1 = w1
        self.conv_w = conv_w
        self.conv_b = conv_b

    @classmethod
    def initialize(cls, config: CbamConfig, rng: Rng, prefix: str = "cbam",
                   dtype=np.float64) -> "CbamParams":
        c, r, k = config.channels, config.reduction_ratio, config.spatial_kernel
        hidden = c // r

        def he(shape, fan_in, name):
            bound = np.sqrt(6.0 / fan_in)
            return Parameter(rng.uniform(-bound, bound, shape, dtype=dtype), name)

        return cls(
            config,
            w0=he((hidden, c), c, f"{prefix}.w0"),
            w1=he((c, hidden), hidden, f"{prefix}.w1"),
            conv_w=he((1, 2, k, k), 2 * k * k, f"{prefix}.conv.w"),
            conv_b=Parameter(np.zeros(1, dtype=dtype), f"{prefix}.conv.b"),
        )

    @classmethod
    def zeros(cls, config: CbamConfig, dtype=np.float64) -> "CbamParams":
        c, r, k = config.channels, config.reduction_ratio, config.spatial_kernel
        hidden = c // r
        return cls(
            config,
            w0=Parameter(np.zeros((hidden, c), dtype=dtype), "cbam.w0"),
            w1=Parameter(np.zeros((c, hidden), dtype=dtype), "cbam.w1"),
            conv_w=Parameter(np.zeros((1, 2, k, k), dtype=dtype), "cbam.conv.w"),
            conv_b=Parameter(np.zeros(1, dtype=dtype), "cbam.conv.b"),
        )

    def parameters(self):
        return [self.w0, self.w1, self.conv_w, self.conv_b]


def _shared_mlp(x: Tensor, params: CbamParams) -> Tensor:
    dtype = x.dtype
    hidden, c = params.w0.shape
    zero_h = Tensor(np.zeros(hidden, dtype=dtype))
    zero_c = Tensor(np.zeros(c, dtype=dtype))
    return ops.dense(ops.relu(ops.dense(x, params.w0, zero_h)), params.w1, zero_c)


def channel_attention(f: Tensor, params: CbamParams) -> Tensor:
    """Per-channel gates in (0,1), shape [B, C, 1, 1]."""
    if f.data.ndim != 4:
        raise ShapeError(f"channel_attention expects [B,C,H,W], got {f.shape}")
    b, c = f.shape[0], f.shape[1]
    if c != params.config.channels:
        raise ShapeError(
            f"input has {c} channels but params were built for {params.config.channels}"
        )
    avg = ops.reshape(ops.pooling(f, "spatial-avg"), (b, c))
    mx = ops.reshape(ops.pooling(f, "spatial-max"), (b, c))
    gate = ops.sigmoid(ops.add(_shared_mlp(avg, params), _shared_mlp(mx, params)))
    return ops.reshape(gate, (b, c, 1, 1))


def spatial_attention(f: Tensor, params: CbamParams) -> Tensor:
    """Per-position gates in (0,1), shape [B, 1, H, W]."""
    if f.data.ndim != 4:
        raise ShapeError(f"spatial_attention expects [B,C,H,W], got {f.shape}")
    k = params.config.spatial_kernel
    avg = ops.pooling(f, "channel-avg")
    mx = ops.pooling(f, "channel-max")
    both = ops.concat([avg, mx], axis=1)
    conv = ops.conv2d(both, params.conv_w, params.conv_b, stride=1, pad=(k - 1) // 2)
    return ops.sigmoid(conv)


def cbam_apply(f: Tensor, params: CbamParams) -> Tensor:
    """Channel gate first, spatial gate second; output shape equals input."""
    gated = ops.mul(f, channel_attention(f, params))
    return ops.mul(gated, spatial_attention(gated, params))
