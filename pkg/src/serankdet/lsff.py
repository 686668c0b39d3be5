"""Selective fusion of encoder and decoder features.

The two feature maps are concatenated, squeezed to channel-wise average
and maximum descriptors, and a wide convolution over those two maps yields
a spatial gate g = sigmoid(logits).  The output is the pointwise convex
combination  g * enc + (1 - g) * dec,  with the gate shared by every
channel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .conv import Conv2dParams, conv2d
from .tensor import Tensor, make_result


def channel_pool(u: Tensor):
    """Mean and max across channels: (N, C, H, W) -> two (N, 1, H, W) maps.

    The max side routes its gradient to the first channel attaining the
    maximum at each location.
    """
    n, c, h, w = u.shape
    avg = T.scalar_mul(T.sum_axes(u, axes=(1,), keepdims=True), 1.0 / c)

    am = u.data.argmax(axis=1)
    mx = np.take_along_axis(u.data, am[:, None], axis=1)

    def bw(g):
        gu = np.zeros_like(u.data)
        np.put_along_axis(gu, am[:, None], g, axis=1)
        return (gu,)

    return avg, make_result(mx, (u,), bw)


@dataclass
class LsffBlock:
    attn_conv: Conv2dParams
    n_maps: int = 1


def make_lsff_block(rng: np.random.Generator, kernel: int = 7, dtype=np.float32) -> LsffBlock:
    bound = math.sqrt(6.0 / (2 * kernel * kernel))
    weight = Tensor(rng.uniform(-bound, bound, size=(1, 2, kernel, kernel)).astype(dtype),
                    requires_grad=True)
    bias = Tensor(np.zeros(1, dtype=dtype), requires_grad=True)
    conv = Conv2dParams(weight=weight, bias=bias, stride=1, padding=kernel // 2, dilation=1)
    return LsffBlock(attn_conv=conv, n_maps=1)


def lsff_forward(x_enc: Tensor, x_dec: Tensor, b: LsffBlock) -> Tensor:
    if x_enc.shape != x_dec.shape:
        raise ValueError(f"fusion inputs differ in shape: {x_enc.shape} vs {x_dec.shape}")
    u = T.concat([x_enc, x_dec], axis=1)
    avg, mx = channel_pool(u)
    logits = conv2d(T.concat([avg, mx], axis=1), b.attn_conv)
    gate = T.sigmoid(logits)
    # g*enc + (1-g)*dec, written so equal inputs pass through bitwise.
    return T.add(x_dec, T.mul(T.sub(x_enc, x_dec), gate))


def lsff_parameters(b: LsffBlock, prefix: str):
    yield f"{prefix}.attn.weight", b.attn_conv.weight
    yield f"{prefix}.attn.bias", b.attn_conv.bias
