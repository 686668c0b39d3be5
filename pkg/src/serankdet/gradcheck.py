"""Gradient verification: tape backward vs central finite differences.

Every check builds a small float64 graph, reduces the output to a scalar
through a fixed random projection, and compares the tape gradient of each
input against `fd_gradient`.  Inputs are continuous random draws, which
keeps max-pool and top-k selections tie-free.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .conv import (BatchNormState, Conv2dParams, batch_norm, bilinear_upsample2,
                   central_difference_conv2d, conv2d, max_pool2)
from .ddc import ddc_forward, make_ddc_block
from .losses import multi_head_loss, soft_iou_loss
from .lsff import lsff_forward, make_lsff_block
from .network import Model, NetConfig
from .serank import SeRankBlock, serank_forward
from .tensor import Tape, Tensor, fd_gradient

LEAF_TOLERANCE = 1e-5
BLOCK_TOLERANCE = 1e-5
NET_TOLERANCE = 1e-4

TOLERANCES = {
    "conv": LEAF_TOLERANCE,
    "cdc": LEAF_TOLERANCE,
    "pool": LEAF_TOLERANCE,
    "upsample": LEAF_TOLERANCE,
    "norm": LEAF_TOLERANCE,
    "softiou": 1e-6,
    "ddc": BLOCK_TOLERANCE,
    "serank": BLOCK_TOLERANCE,
    "lsff": BLOCK_TOLERANCE,
    "net": NET_TOLERANCE,
}


def max_rel_err(a: np.ndarray, b: np.ndarray) -> float:
    num = float(np.max(np.abs(a - b))) if a.size else 0.0
    den = max(float(np.max(np.abs(a))) if a.size else 0.0,
              float(np.max(np.abs(b))) if b.size else 0.0,
              1e-12)
    return num / den


def _param(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True, dtype=np.float64)


def compare(forward, inputs: list[Tensor], rng) -> float:
    """Max relative error between tape and finite-difference gradients of
    a random scalar projection of `forward()`."""
    with Tape() as tape:
        out = forward()
        proj = Tensor(rng.normal(size=out.shape), dtype=np.float64)
        loss = T.sum_all(T.mul(out, proj))
        tape.backward(loss)
    tape_grads = [p.grad.copy() for p in inputs]
    for p in inputs:
        p.grad = None

    def scalar(_x):
        return T.sum_all(T.mul(forward(), proj))

    worst = 0.0
    for p, tg in zip(inputs, tape_grads):
        fd = fd_gradient(lambda _t: scalar(None), p).data
        worst = max(worst, max_rel_err(tg, fd))
    return worst


def check_conv(seed=0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for stride, pad, dil in [(1, 1, 1), (2, 0, 1), (1, 2, 2), (2, 2, 2)]:
        x = _param(rng, 2, 3, 9, 9)
        w = _param(rng, 4, 3, 3, 3, scale=0.5)
        b = _param(rng, 4, scale=0.1)
        p = Conv2dParams(weight=w, bias=b, stride=stride, padding=pad, dilation=dil)
        worst = max(worst, compare(lambda: conv2d(x, p), [x, w, b], rng))
    return worst


def check_cdc(seed=0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for stride, pad in [(1, 1), (1, 0), (2, 1)]:
        x = _param(rng, 2, 2, 8, 8)
        w = _param(rng, 3, 2, 3, 3, scale=0.5)
        b = _param(rng, 3, scale=0.1)
        p = Conv2dParams(weight=w, bias=b, stride=stride, padding=pad, dilation=1)
        worst = max(worst, compare(lambda: central_difference_conv2d(x, p), [x, w, b], rng))
    return worst


def check_pool(seed=0) -> float:
    rng = np.random.default_rng(seed)
    x = _param(rng, 2, 3, 6, 6)
    return compare(lambda: max_pool2(x), [x], rng)


def check_upsample(seed=0) -> float:
    rng = np.random.default_rng(seed)
    x = _param(rng, 2, 2, 5, 7)
    return compare(lambda: bilinear_upsample2(x), [x], rng)


def check_norm(seed=0) -> float:
    rng = np.random.default_rng(seed)
    x = _param(rng, 3, 4, 5, 5)
    st = BatchNormState.create(4, dtype=np.float64)
    st.gamma = Tensor(rng.normal(1.0, 0.2, size=4), requires_grad=True, dtype=np.float64)
    st.beta = Tensor(rng.normal(0.0, 0.2, size=4), requires_grad=True, dtype=np.float64)
    return compare(lambda: batch_norm(x, st), [x, st.gamma, st.beta], rng)


def check_softiou(seed=0) -> float:
    rng = np.random.default_rng(seed)
    logits = _param(rng, 2, 1, 6, 6)
    target = Tensor((rng.random((2, 1, 6, 6)) < 0.2).astype(np.float64))
    return compare(lambda: soft_iou_loss(logits, target), [logits], rng)


def check_ddc(seed=0) -> float:
    rng = np.random.default_rng(seed)
    block = make_ddc_block(3, 4, rng, dtype=np.float64)
    x = _param(rng, 1, 3, 12, 12)
    params = [x] + [t for _, t in _ddc_param_list(block)]
    return compare(lambda: ddc_forward(x, block), params, rng)


def _ddc_param_list(block):
    from .ddc import ddc_parameters

    return list(ddc_parameters(block, "b"))


def check_serank(seed=0) -> float:
    rng = np.random.default_rng(seed)
    block = SeRankBlock.create(4, offset=1, stage=1, rng=rng, dtype=np.float64)
    x = _param(rng, 1, 4, 8, 8)
    return compare(lambda: serank_forward(x, block), [x, block.w_q, block.w_k], rng)


def check_lsff(seed=0) -> float:
    rng = np.random.default_rng(seed)
    block = make_lsff_block(rng, kernel=7, dtype=np.float64)
    enc = _param(rng, 2, 3, 9, 9)
    dec = _param(rng, 2, 3, 9, 9)
    params = [enc, dec, block.attn_conv.weight, block.attn_conv.bias]
    return compare(lambda: lsff_forward(enc, dec, block), params, rng)


def check_net(seed=0, n_elements=50) -> float:
    """End-to-end check on a micro configuration: a random subset of
    parameter elements, finite differences against the tape."""
    rng = np.random.default_rng(seed)
    cfg = NetConfig(channels=(4, 8, 16, 32, 64))
    model = Model(cfg, seed=seed, dtype=np.float64)
    model.set_training(True)
    x = Tensor(rng.random((1, 1, 32, 32)), dtype=np.float64)
    target = Tensor((rng.random((1, 1, 32, 32)) < 0.05).astype(np.float64))

    def loss_value():
        return multi_head_loss(model.forward(x).logits, target)

    model.zero_grad()
    with Tape() as tape:
        tape.backward(loss_value())

    named = list(model.named_parameters().items())
    flat_index = [(i, e) for i, (_, p) in enumerate(named) for e in range(p.size)]
    picks = rng.choice(len(flat_index), size=min(n_elements, len(flat_index)), replace=False)

    per_param: dict[int, list[int]] = {}
    for k in picks:
        i, e = flat_index[k]
        per_param.setdefault(i, []).append(e)

    tape_vals, fd_vals = [], []
    for i, elements in per_param.items():
        p = named[i][1]
        fd = fd_gradient(lambda _t: loss_value(), p, elements=elements).data.reshape(-1)
        tg = p.grad.reshape(-1)
        for e in elements:
            tape_vals.append(tg[e])
            fd_vals.append(fd[e])
    return max_rel_err(np.asarray(tape_vals), np.asarray(fd_vals))


CHECKS = {
    "conv": check_conv,
    "cdc": check_cdc,
    "pool": check_pool,
    "upsample": check_upsample,
    "norm": check_norm,
    "softiou": check_softiou,
    "ddc": check_ddc,
    "serank": check_serank,
    "lsff": check_lsff,
    "net": check_net,
}


def run_checks(names=None, seed=0) -> dict[str, tuple[float, float, bool]]:
    """name -> (max rel err, tolerance, passed)."""
    names = list(CHECKS) if names is None else list(names)
    results = {}
    for name in names:
        if name not in CHECKS:
            raise KeyError(f"unknown gradcheck module: {name}")
        err = CHECKS[name](seed=seed)
        tol = TOLERANCES[name]
        results[name] = (err, tol, err < tol)
    return results
