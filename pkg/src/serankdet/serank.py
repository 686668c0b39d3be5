"""Selective rank-aware channel attention.

Per channel, the K strongest responses are selected together with their
spatial coordinates, tagged with a sinusoidal positional code, projected to
query/key matrices, and turned into a C x C channel-attention map that is
applied residually: out = (I + A) x.  The attention core's arithmetic cost
depends on (C, K) only, not on the spatial extent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .counting import bucket
from .tensor import Tensor, make_result


def compute_k(channels: int, offset: int, stage: int) -> int:
    """Selection count K = 2^floor(log2(C) + o - 2*(i-1)), floored at 1.

    `stage` is the 1-based encoder stage number.  Callers clamp the result
    to the spatial size H*W of the map being selected from.
    """
    if channels < 1:
        raise ValueError(f"channels must be positive, got {channels}")
    e = math.floor(math.log2(channels) + offset - 2 * (stage - 1))
    if e < 0:
        return 1
    return 2 ** e


@dataclass
class SelectedFeatures:
    """Top-K values per channel (rows sorted descending) and their source
    coordinates in the H x W grid."""

    values: Tensor          # (C, K)
    rows: np.ndarray        # (C, K) int
    cols: np.ndarray        # (C, K) int
    k: int


def _topk_indices_1d(v: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries of `v`; ties broken by ascending
    index.  Result ordered by (value desc, index asc).  Linear-time scan
    plus an O(k log k) ordering of the selected entries."""
    n = v.size
    if k == n:
        chosen = np.arange(n)
    else:
        part = np.argpartition(v, n - k)[n - k:]
        boundary = v[part].min()
        above = np.flatnonzero(v > boundary)
        need = k - above.size
        at = np.flatnonzero(v == boundary)[:need]
        chosen = np.concatenate([above, at])
    order = np.lexsort((chosen, -v[chosen]))
    return chosen[order]


def topk_select(x: Tensor, k: int) -> SelectedFeatures:
    """Per-channel Top-K of a (C, H, W) map.

    Backward scatters the incoming gradient to the selected positions and
    leaves everything else at zero (the selection indices themselves are
    treated as constants).
    """
    c, h, w = x.shape
    hw = h * w
    if not 1 <= k <= hw:
        raise ValueError(f"k={k} out of range [1, {hw}]")
    flat = x.data.reshape(c, hw)
    idx = np.empty((c, k), dtype=np.int64)
    for ch in range(c):
        idx[ch] = _topk_indices_1d(flat[ch], k)
    values = np.take_along_axis(flat, idx, axis=1)

    def bw(g):
        gx = np.zeros_like(flat)
        np.put_along_axis(gx, idx, g, axis=1)
        return (gx.reshape(c, h, w),)

    vt = make_result(np.ascontiguousarray(values), (x,), bw)
    return SelectedFeatures(values=vt, rows=idx // w, cols=idx % w, k=k)


@dataclass
class PosTable:
    """Sinusoidal positional codes over an H x W grid; sin fills even
    columns, cos fills odd ones, column pair j shares frequency d_j."""

    table: np.ndarray  # (H, W), values in [-1, 1]


def build_pos_table(height: int, width: int, dtype=np.float64) -> PosTable:
    if width < 2:
        raise ValueError(f"positional table needs width >= 2, got {width}")
    scale = math.exp(-math.log(10000.0) / width)
    pairs = np.arange((width + 1) // 2)
    d = 2.0 * pairs * scale
    rows = np.arange(height, dtype=np.float64)
    angles = rows[:, None] * d[None, :]  # (H, n_pairs)
    table = np.empty((height, width), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : width // 2])
    return PosTable(table=table.astype(dtype))


def gather_positions(sel: SelectedFeatures, pos: PosTable) -> np.ndarray:
    """Codes of the selected coordinates: P[c, j] = E[row(c,j), col(c,j)]."""
    h, w = pos.table.shape
    if sel.rows.max(initial=0) >= h or sel.cols.max(initial=0) >= w:
        raise ValueError("selected coordinate outside the positional table")
    return pos.table[sel.rows, sel.cols]


@dataclass
class SeRankBlock:
    """Projections and schedule state for one attention block."""

    w_q: Tensor              # (K, 2K)
    w_k: Tensor              # (K, 2K)
    k: int
    offset: int = 3
    stage: int = 1
    eps: float = 1e-5
    use_pe: bool = True
    _pos_cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def create(cls, channels: int, offset: int, stage: int, rng: np.random.Generator,
               dtype=np.float32, use_pe: bool = True, k_cap: int | None = None) -> "SeRankBlock":
        k = compute_k(channels, offset, stage)
        if k_cap is not None:
            k = max(1, min(k, k_cap))
        bound = math.sqrt(6.0 / k)
        w_q = Tensor(rng.uniform(-bound, bound, size=(k, 2 * k)).astype(dtype), requires_grad=True)
        w_k = Tensor(rng.uniform(-bound, bound, size=(k, 2 * k)).astype(dtype), requires_grad=True)
        return cls(w_q=w_q, w_k=w_k, k=k, offset=offset, stage=stage, use_pe=use_pe)

    def pos_table(self, h: int, w: int, dtype) -> PosTable:
        key = (h, w, np.dtype(dtype).name)
        if key not in self._pos_cache:
            self._pos_cache[key] = build_pos_table(h, w, dtype=dtype)
        return self._pos_cache[key]


def serank_attention(x_chw: Tensor, b: SeRankBlock) -> Tensor:
    """Residual channel attention for one (C, H, W) item."""
    c, h, w = x_chw.shape
    k = max(1, min(b.k, h * w))
    sel = topk_select(x_chw, k)
    t = sel.values
    if b.use_pe:
        pos = b.pos_table(h, w, x_chw.dtype)
        t = T.add(t, Tensor(gather_positions(sel, pos)))
    if k < b.k:
        # Fewer pixels than selection slots: the schedule is clamped to the
        # map size and the spare slots stay empty.
        t = T.concat([t, Tensor(np.zeros((c, b.k - k), dtype=x_chw.dtype))], axis=1)
    with bucket("attention_core"):
        q = T.matmul(t, b.w_q)
        km = T.matmul(t, b.w_k)
        scores = T.matmul(q, T.transpose(km))
        # A 1x1 score matrix has no statistics to standardize; softmax of a
        # single-element row is 1 either way.
        normed = T.standardize(scores, eps=b.eps) if c > 1 else scores
        attn = T.softmax_rows(normed)
    x_flat = T.reshape(x_chw, (c, h * w))
    out = T.add(x_flat, T.matmul(attn, x_flat))
    return T.reshape(out, (c, h, w))


def serank_forward(x: Tensor, b: SeRankBlock) -> Tensor:
    """Apply the attention block to every item of an (N, C, H, W) batch."""
    n = x.shape[0]
    items = [T.reshape(serank_attention(x[i], b), (1,) + x.shape[1:]) for i in range(n)]
    return items[0] if n == 1 else T.concat(items, axis=0)
