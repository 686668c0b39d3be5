"""Dilated difference convolution block.

Three parallel branches over the same input: a plain 3x3 convolution, a
central-difference 3x3 convolution, and a chain of three dilated 3x3
convolutions with rates (2, 4, 2).  Branch outputs are concatenated and
merged by a 1x1 convolution.  Branches can be toggled off for ablations,
in which case the merge shrinks to match.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .conv import BatchNormState, Conv2dParams, batch_norm, central_difference_conv2d, conv2d
from .tensor import Tensor

DILATION_RATES = (2, 4, 2)


def _kaiming_conv(rng: np.random.Generator, c_out: int, c_in: int, k: int, dtype,
                  with_bias: bool = True) -> Conv2dParams:
    bound = math.sqrt(6.0 / (c_in * k * k))
    weight = Tensor(rng.uniform(-bound, bound, size=(c_out, c_in, k, k)).astype(dtype), requires_grad=True)
    bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True) if with_bias else None
    return Conv2dParams(weight=weight, bias=bias, stride=1, padding=k // 2, dilation=1)


@dataclass
class _ConvUnit:
    conv: Conv2dParams
    norm: BatchNormState | None


@dataclass
class DdcBlock:
    branch_std: _ConvUnit
    branch_cdc: _ConvUnit | None
    branch_dil: list[_ConvUnit] | None
    merge: Conv2dParams
    use_norm: bool = True


def make_ddc_block(c_in: int, c_out: int, rng: np.random.Generator, dtype=np.float32,
                   use_cdc: bool = True, use_dilated: bool = True, use_norm: bool = True) -> DdcBlock:
    def unit(ci, co, dilation=1):
        # Norm cancels any constant shift, so normalized convs carry no bias.
        p = _kaiming_conv(rng, co, ci, 3, dtype, with_bias=not use_norm)
        p.dilation = dilation
        p.padding = dilation
        norm = BatchNormState.create(co, dtype=dtype) if use_norm else None
        return _ConvUnit(conv=p, norm=norm)

    branch_std = unit(c_in, c_out)
    branch_cdc = unit(c_in, c_out) if use_cdc else None
    branch_dil = [unit(c_in, c_out, DILATION_RATES[0]),
                  unit(c_out, c_out, DILATION_RATES[1]),
                  unit(c_out, c_out, DILATION_RATES[2])] if use_dilated else None
    n_branches = 1 + int(use_cdc) + int(use_dilated)
    merge = _kaiming_conv(rng, c_out, n_branches * c_out, 1, dtype)
    return DdcBlock(branch_std=branch_std, branch_cdc=branch_cdc,
                    branch_dil=branch_dil, merge=merge, use_norm=use_norm)


def ddc_ablate(b: DdcBlock, use_cdc: bool, use_dilated: bool,
               rng: np.random.Generator | None = None) -> DdcBlock:
    """Return a copy of `b` with the requested branches only; the merge
    convolution is rebuilt for the new input width."""
    keep_cdc = b.branch_cdc if use_cdc else None
    keep_dil = b.branch_dil if use_dilated else None
    if use_cdc and keep_cdc is None:
        raise ValueError("cannot enable a cdc branch the block was built without")
    if use_dilated and keep_dil is None:
        raise ValueError("cannot enable a dilated branch the block was built without")
    c_out = b.merge.weight.shape[0]
    n_branches = 1 + int(use_cdc) + int(use_dilated)
    if b.merge.weight.shape[1] == n_branches * c_out:
        merge = b.merge
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        merge = _kaiming_conv(rng, c_out, n_branches * c_out, 1, b.merge.weight.dtype)
    return DdcBlock(branch_std=b.branch_std, branch_cdc=keep_cdc,
                    branch_dil=keep_dil, merge=merge, use_norm=b.use_norm)


def _run_unit(x: Tensor, u: _ConvUnit, cdc: bool = False) -> Tensor:
    y = central_difference_conv2d(x, u.conv) if cdc else conv2d(x, u.conv)
    if u.norm is not None:
        y = batch_norm(y, u.norm)
    return T.relu(y)


def ddc_forward(x: Tensor, b: DdcBlock) -> Tensor:
    """(N, C_in, H, W) -> (N, C_out, H, W); spatial extent preserved."""
    outs = [_run_unit(x, b.branch_std)]
    if b.branch_cdc is not None:
        outs.append(_run_unit(x, b.branch_cdc, cdc=True))
    if b.branch_dil is not None:
        y = x
        for u in b.branch_dil:
            y = _run_unit(y, u)
        outs.append(y)
    merged = outs[0] if len(outs) == 1 else T.concat(outs, axis=1)
    return conv2d(merged, b.merge)


def ddc_parameters(b: DdcBlock, prefix: str):
    """Yield (name, tensor) for every trainable parameter of the block."""
    units = [("std", b.branch_std)]
    if b.branch_cdc is not None:
        units.append(("cdc", b.branch_cdc))
    if b.branch_dil is not None:
        units.extend((f"dil{i}", u) for i, u in enumerate(b.branch_dil))
    for name, u in units:
        yield f"{prefix}.{name}.weight", u.conv.weight
        if u.conv.bias is not None:
            yield f"{prefix}.{name}.bias", u.conv.bias
        if u.norm is not None:
            yield f"{prefix}.{name}.gamma", u.norm.gamma
            yield f"{prefix}.{name}.beta", u.norm.beta
    yield f"{prefix}.merge.weight", b.merge.weight
    yield f"{prefix}.merge.bias", b.merge.bias


def ddc_norm_states(b: DdcBlock, prefix: str):
    units = [("std", b.branch_std)]
    if b.branch_cdc is not None:
        units.append(("cdc", b.branch_cdc))
    if b.branch_dil is not None:
        units.extend((f"dil{i}", u) for i, u in enumerate(b.branch_dil))
    for name, u in units:
        if u.norm is not None:
            yield f"{prefix}.{name}", u.norm
