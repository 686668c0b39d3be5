"""2-D convolution family: standard, dilated, central-difference, pooling,
bilinear upsampling and batch normalization.

Convolutions use cross-correlation semantics (no kernel flip) with zero
padding, evaluated through im2col so the inner product runs on BLAS.
Every op registers a full backward rule on the active tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .counting import add_ops
from .tensor import Tensor, make_result


@dataclass
class Conv2dParams:
    """Weights and geometry of one convolution layer.

    weight: Tensor[C_out, C_in, k, k], bias: Tensor[C_out] or None.
    Kernels are odd (1 or 3 in this network).
    """

    weight: Tensor
    bias: Tensor | None = None
    stride: int = 1
    padding: int = 0
    dilation: int = 1


def conv_out_extent(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _check_geometry(x: Tensor, p: Conv2dParams):
    n, c_in, h, w = x.shape
    c_out, c_in_w, kh, kw = p.weight.shape
    if kh != kw:
        raise ValueError(f"square kernels only, got {kh}x{kw}")
    if c_in != c_in_w:
        raise ValueError(
            f"input channels {c_in} do not match weight input channels {c_in_w} "
            f"(input {x.shape}, weight {p.weight.shape})"
        )
    h_out = conv_out_extent(h, kh, p.stride, p.padding, p.dilation)
    w_out = conv_out_extent(w, kw, p.stride, p.padding, p.dilation)
    if h_out < 1 or w_out < 1:
        raise ValueError(
            f"conv output extent not positive: input {h}x{w}, kernel {kh}, "
            f"stride {p.stride}, padding {p.padding}, dilation {p.dilation}"
        )
    return n, c_in, h, w, c_out, kh, h_out, w_out


def _im2col(xp: np.ndarray, k: int, stride: int, dilation: int, h_out: int, w_out: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (N, C*k*k, h_out*w_out) patch matrix."""
    n, c = xp.shape[:2]
    ke = dilation * (k - 1) + 1
    win = sliding_window_view(xp, (ke, ke), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, ::dilation, ::dilation]
    win = win[:, :, :h_out, :w_out]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, h_out * w_out)
    return np.ascontiguousarray(cols)


def _col2im(dcols: np.ndarray, x_shape, k: int, stride: int, padding: int,
            dilation: int, h_out: int, w_out: int) -> np.ndarray:
    """Scatter-add the im2col adjoint back into an input-shaped array."""
    n, c, h, w = x_shape
    gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    d6 = dcols.reshape(n, c, k, k, h_out, w_out)
    for ki in range(k):
        for kj in range(k):
            gxp[:, :,
                ki * dilation: ki * dilation + h_out * stride: stride,
                kj * dilation: kj * dilation + w_out * stride: stride] += d6[:, :, ki, kj]
    if padding:
        gxp = gxp[:, :, padding: padding + h, padding: padding + w]
    return np.ascontiguousarray(gxp)


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """Cross-correlation with zero padding; gradients for input, weight, bias."""
    n, c_in, h, w, c_out, k, h_out, w_out = _check_geometry(x, p)
    stride, padding, dilation = p.stride, p.padding, p.dilation

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride, dilation, h_out, w_out)
    w_flat = p.weight.data.reshape(c_out, c_in * k * k)
    out = np.matmul(w_flat, cols)
    if p.bias is not None:
        out += p.bias.data[:, None]
    out = out.reshape(n, c_out, h_out, w_out)
    add_ops(2 * n * c_out * c_in * k * k * h_out * w_out)

    inputs = (x, p.weight) if p.bias is None else (x, p.weight, p.bias)

    def bw(g):
        g_flat = g.reshape(n, c_out, h_out * w_out)
        gw = np.matmul(g_flat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(p.weight.shape)
        dcols = np.matmul(w_flat.T, g_flat)
        gx = _col2im(dcols, x.shape, k, stride, padding, dilation, h_out, w_out)
        if p.bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_result(out, inputs, bw)


def central_difference_conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """Convolution over differences against the window center:

        y(p0) = sum_n w(p_n) * (x(p0 + p_n) - x(p0)) + bias

    Neighbors that fall outside the frame contribute zero difference, so a
    constant input maps to the bias exactly, including at borders.  Requires
    padding <= dilation*(k-1)/2 so every window center lies in the frame.
    """
    n, c_in, h, w, c_out, k, h_out, w_out = _check_geometry(x, p)
    stride, padding, dilation = p.stride, p.padding, p.dilation
    half = dilation * (k - 1) // 2
    if padding > half:
        raise ValueError(
            f"central-difference conv needs padding <= dilation*(k-1)/2, got padding {padding}"
        )

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride, dilation, h_out, w_out)
    w_flat = p.weight.data.reshape(c_out, c_in * k * k)

    # Differences are formed before any weighting so constants cancel
    # bitwise; out-of-frame taps are masked off.
    taps = np.arange(k) * dilation
    rows = np.arange(h_out) * stride
    cols_o = np.arange(w_out) * stride
    in_r = (rows[:, None] + taps[None, :] >= padding) & (rows[:, None] + taps[None, :] < h + padding)
    in_c = (cols_o[:, None] + taps[None, :] >= padding) & (cols_o[:, None] + taps[None, :] < w + padding)
    mask4 = in_r.T[:, None, :, None] & in_c.T[None, :, None, :]  # (ki, kj, oh, ow)
    mask = np.tile(mask4.reshape(k * k, h_out * w_out).astype(x.dtype), (c_in, 1))

    r0 = rows + half
    c0 = cols_o + half
    centers = xp[:, :, r0[:, None], c0[None, :]].reshape(n, c_in, h_out * w_out)
    diff = (cols - np.repeat(centers, k * k, axis=1)) * mask

    out = np.matmul(w_flat, diff)
    if p.bias is not None:
        out = out + p.bias.data[:, None]
    out = out.reshape(n, c_out, h_out, w_out)
    add_ops(4 * n * c_out * c_in * k * k * h_out * w_out)

    inputs = (x, p.weight) if p.bias is None else (x, p.weight, p.bias)

    def bw(g):
        g_flat = g.reshape(n, c_out, h_out * w_out)
        gw = np.matmul(g_flat, diff.transpose(0, 2, 1)).sum(axis=0).reshape(p.weight.shape)
        ddiff = np.matmul(w_flat.T, g_flat) * mask
        gx = _col2im(ddiff, x.shape, k, stride, padding, dilation, h_out, w_out)
        dcenters = -ddiff.reshape(n, c_in, k * k, h_out * w_out).sum(axis=2)
        gxp = np.zeros((n, c_in, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
        gxp[:, :, r0[:, None], c0[None, :]] = dcenters.reshape(n, c_in, h_out, w_out)
        if padding:
            gxp = gxp[:, :, padding: padding + h, padding: padding + w]
        gx += gxp

        if p.bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_result(out, inputs, bw)


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; ties route the gradient to the first
    window element in row-major scan order."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"max_pool2 needs even spatial extents, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    am = win.argmax(axis=-1)
    out = np.take_along_axis(win, am[..., None], axis=-1)[..., 0]
    add_ops(x.size)

    def bw(g):
        gwin = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gwin, am[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (np.ascontiguousarray(gx),)

    return make_result(np.ascontiguousarray(out), (x,), bw)


def _upsample_axis_weights(size: int, dtype):
    """Source indices and interpolation weights for 2x upsampling, using the
    align_corners=false convention s = (t + 0.5)/2 - 0.5, clamped."""
    t = np.arange(2 * size, dtype=np.float64)
    s = np.clip((t + 0.5) / 2.0 - 0.5, 0.0, size - 1)
    i0 = np.floor(s).astype(np.int64)
    i1 = np.minimum(i0 + 1, size - 1)
    w1 = (s - i0).astype(dtype)
    w0 = (1.0 - w1).astype(dtype)
    return i0, i1, w0, w1


def bilinear_upsample2(x: Tensor) -> Tensor:
    """Double both spatial extents by bilinear interpolation."""
    n, c, h, w = x.shape
    r0, r1, wr0, wr1 = _upsample_axis_weights(h, x.dtype)
    c0, c1, wc0, wc1 = _upsample_axis_weights(w, x.dtype)

    xr = x.data[:, :, r0, :] * wr0[:, None] + x.data[:, :, r1, :] * wr1[:, None]
    out = xr[:, :, :, c0] * wc0 + xr[:, :, :, c1] * wc1
    add_ops(6 * out.size)

    def bw(g):
        gxr = np.zeros((n, c, 2 * h, w), dtype=g.dtype)
        np.add.at(gxr, (slice(None), slice(None), slice(None), c0), g * wc0)
        np.add.at(gxr, (slice(None), slice(None), slice(None), c1), g * wc1)
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        np.add.at(gx, (slice(None), slice(None), r0, slice(None)), gxr * wr0[:, None])
        np.add.at(gx, (slice(None), slice(None), r1, slice(None)), gxr * wr1[:, None])
        return (gx,)

    return make_result(np.ascontiguousarray(out), (x,), bw)


@dataclass
class BatchNormState:
    """Per-channel affine normalization with running statistics."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    training: bool = True

    @classmethod
    def create(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )


def batch_norm(x: Tensor, s: BatchNormState) -> Tensor:
    """Normalize per channel; batch statistics in training mode (updating the
    running estimates), running statistics in inference mode."""
    n, c, h, w = x.shape
    if c != s.gamma.size:
        raise ValueError(f"batch_norm channels {c} do not match state ({s.gamma.size})")
    gamma, beta = s.gamma, s.beta
    add_ops(4 * x.size)

    if s.training:
        m = n * h * w
        mu = x.data.mean(axis=(0, 2, 3))
        var = ((x.data - mu[None, :, None, None]) ** 2).mean(axis=(0, 2, 3))
        s.running_mean = ((1.0 - s.momentum) * s.running_mean + s.momentum * mu).astype(s.running_mean.dtype)
        s.running_var = ((1.0 - s.momentum) * s.running_var + s.momentum * var).astype(s.running_var.dtype)
        inv = 1.0 / np.sqrt(var + s.eps)
        xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
        out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

        def bw(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            gi = gamma.data * inv
            gx = gi[None, :, None, None] * (
                g
                - (dbeta / m)[None, :, None, None]
                - xhat * (dgamma / m)[None, :, None, None]
            )
            return gx.astype(x.dtype, copy=False), dgamma, dbeta

        return make_result(out.astype(x.dtype, copy=False), (x, gamma, beta), bw)

    inv = 1.0 / np.sqrt(s.running_var + s.eps)
    xhat = (x.data - s.running_mean[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bw(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        gx = (gamma.data * inv)[None, :, None, None] * g
        return gx.astype(x.dtype, copy=False), dgamma, dbeta

    return make_result(out.astype(x.dtype, copy=False), (x, gamma, beta), bw)
