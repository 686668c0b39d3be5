"""AdamW with decoupled weight decay, and polynomial learning-rate decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamWState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def create(cls, params: list[Tensor], lr: float = 1e-4,
               weight_decay: float = 1e-2) -> "AdamWState":
        return cls(lr=lr, weight_decay=weight_decay,
                   m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params])


def adamw_step(params: list[Tensor], grads: list[np.ndarray], st: AdamWState):
    """One update: decoupled decay first, then the bias-corrected Adam move."""
    st.step += 1
    b1c = 1.0 - st.beta1 ** st.step
    b2c = 1.0 - st.beta2 ** st.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if st.weight_decay:
            p.data *= 1.0 - st.lr * st.weight_decay
        st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * g
        st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * (g * g)
        m_hat = st.m[i] / b1c
        v_hat = st.v[i] / b2c
        p.data -= (st.lr * m_hat / (np.sqrt(v_hat) + st.eps)).astype(p.dtype, copy=False)


def poly_lr(base_lr: float, iteration: int, max_iter: int, power: float = 0.9) -> float:
    """base_lr * (1 - iter/max_iter)^power."""
    if not 0 <= iteration <= max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {max_iter}]")
    return base_lr * (1.0 - iteration / max_iter) ** power
