"""Network assembly: five encoder stages of DDC + channel attention, a
decoder with selective fusion at each skip connection, and 1x1 detection
heads with optional deep supervision."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .conv import BatchNormState, Conv2dParams, bilinear_upsample2, conv2d, max_pool2
from .ddc import DdcBlock, ddc_forward, ddc_norm_states, ddc_parameters, make_ddc_block
from .lsff import LsffBlock, lsff_forward, lsff_parameters, make_lsff_block
from .serank import SeRankBlock, compute_k, serank_forward
from .tensor import Tensor


@dataclass
class NetConfig:
    channels: tuple = (64, 128, 256, 512, 1024)
    offset_o: int = 3
    input_channels: int = 1
    dilations: tuple = (2, 4, 2)
    lsff_kernel: int = 7
    deep_supervision: bool = True
    use_ddc: bool = True
    use_serank: bool = True
    use_lsff: bool = True
    use_pe: bool = True

    def validate(self):
        if len(self.channels) != 5:
            raise ValueError(f"expected 5 stage widths, got {len(self.channels)}")
        for a, b in zip(self.channels, self.channels[1:]):
            if b <= a:
                raise ValueError(f"stage widths must be strictly increasing, got {self.channels}")
        for c in self.channels:
            if c < 1 or (c & (c - 1)) != 0:
                raise ValueError(f"stage widths must be powers of two, got {self.channels}")


@dataclass
class NetOutputs:
    """Head logits at input resolution, final head first."""

    logits: list


def _conv1x1(rng: np.random.Generator, c_in: int, c_out: int, dtype) -> Conv2dParams:
    bound = math.sqrt(6.0 / c_in)
    weight = Tensor(rng.uniform(-bound, bound, size=(c_out, c_in, 1, 1)).astype(dtype),
                    requires_grad=True)
    bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
    return Conv2dParams(weight=weight, bias=bias)


class Model:
    """Trained state plus the forward pass.  Training a given instance must
    be serialized; inference may share the parameters across threads."""

    def __init__(self, cfg: NetConfig, seed: int, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.global_step = 0
        rng = np.random.default_rng(seed)

        ch = cfg.channels
        ins = (cfg.input_channels,) + tuple(ch[:-1])
        self.encoder: list[DdcBlock] = []
        self.attention: list[SeRankBlock | None] = []
        for i in range(5):
            blk = make_ddc_block(ins[i], ch[i], rng, dtype=dtype,
                                 use_cdc=cfg.use_ddc, use_dilated=cfg.use_ddc)
            self.encoder.append(blk)
            if cfg.use_serank:
                self.attention.append(SeRankBlock.create(ch[i], cfg.offset_o, i + 1, rng,
                                                         dtype=dtype, use_pe=cfg.use_pe))
            else:
                self.attention.append(None)

        # Decoder stage d fuses encoder stage d with the upsampled deeper path.
        self.reduce: list[Conv2dParams] = []
        self.fuse: list[LsffBlock | Conv2dParams] = []
        self.heads: list[Conv2dParams] = []
        for d in (4, 3, 2, 1):
            self.reduce.append(_conv1x1(rng, ch[d], ch[d - 1], dtype))
            if cfg.use_lsff:
                self.fuse.append(make_lsff_block(rng, kernel=cfg.lsff_kernel, dtype=dtype))
            else:
                self.fuse.append(_conv1x1(rng, 2 * ch[d - 1], ch[d - 1], dtype))
            self.heads.append(_conv1x1(rng, ch[d - 1], 1, dtype))

    # -- parameter registry -------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for i, blk in enumerate(self.encoder):
            params.update(ddc_parameters(blk, f"enc{i + 1}"))
            at = self.attention[i]
            if at is not None:
                params[f"enc{i + 1}.attn.wq"] = at.w_q
                params[f"enc{i + 1}.attn.wk"] = at.w_k
        for j, d in enumerate((4, 3, 2, 1)):
            params[f"dec{d}.reduce.weight"] = self.reduce[j].weight
            params[f"dec{d}.reduce.bias"] = self.reduce[j].bias
            fuse = self.fuse[j]
            if isinstance(fuse, LsffBlock):
                params.update(lsff_parameters(fuse, f"dec{d}.lsff"))
            else:
                params[f"dec{d}.fuse.weight"] = fuse.weight
                params[f"dec{d}.fuse.bias"] = fuse.bias
            params[f"dec{d}.head.weight"] = self.heads[j].weight
            params[f"dec{d}.head.bias"] = self.heads[j].bias
        return params

    def named_norm_states(self) -> dict[str, BatchNormState]:
        states: dict[str, BatchNormState] = {}
        for i, blk in enumerate(self.encoder):
            states.update(ddc_norm_states(blk, f"enc{i + 1}"))
        return states

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def set_training(self, training: bool):
        for st in self.named_norm_states().values():
            st.training = training

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    # -- forward ------------------------------------------------------------

    def forward(self, x: Tensor) -> NetOutputs:
        n, c, h, w = x.shape
        if h % 16 or w % 16:
            raise ValueError(f"spatial extents must be divisible by 16, got {h}x{w}")
        if c != self.cfg.input_channels:
            raise ValueError(f"expected {self.cfg.input_channels} input channels, got {c}")

        skips = []
        cur = x
        for i in range(5):
            cur = ddc_forward(cur, self.encoder[i])
            at = self.attention[i]
            if at is not None:
                cur = serank_forward(cur, at)
            skips.append(cur)
            if i < 4:
                cur = max_pool2(cur)

        head_logits = []
        for j, d in enumerate((4, 3, 2, 1)):
            up = conv2d(bilinear_upsample2(cur), self.reduce[j])
            fuse = self.fuse[j]
            if isinstance(fuse, LsffBlock):
                cur = lsff_forward(skips[d - 1], up, fuse)
            else:
                cur = conv2d(T.concat([skips[d - 1], up], axis=1), fuse)
            head_logits.append(conv2d(cur, self.heads[j]))

        logits = [_resize_to(head_logits[3], h, w)]
        if self.cfg.deep_supervision:
            for hl in head_logits[2::-1]:
                logits.append(_resize_to(hl, h, w))
        return NetOutputs(logits=logits)

    def predict(self, x: Tensor) -> Tensor:
        """Probabilities from the final head, inference mode, no tape."""
        from .tensor import no_tape

        was_training = any(st.training for st in self.named_norm_states().values())
        self.set_training(False)
        try:
            with no_tape():
                out = self.forward(x)
                probs = T.sigmoid(out.logits[0])
        finally:
            self.set_training(was_training)
        return probs


def _resize_to(t: Tensor, h: int, w: int) -> Tensor:
    while t.shape[2] < h or t.shape[3] < w:
        t = bilinear_upsample2(t)
    if t.shape[2] != h or t.shape[3] != w:
        raise ValueError(f"cannot resize {t.shape} to {h}x{w} by doubling")
    return t


def build(cfg: NetConfig, seed: int, dtype=np.float32) -> Model:
    return Model(cfg, seed, dtype=dtype)


def forward(m: Model, x: Tensor) -> NetOutputs:
    return m.forward(x)


def predict(m: Model, x: Tensor) -> Tensor:
    return m.predict(x)


def stage_k_values(cfg: NetConfig) -> list[int]:
    """Unclamped selection counts per encoder stage."""
    return [compute_k(c, cfg.offset_o, i + 1) for i, c in enumerate(cfg.channels)]
