from __future__ import annotations

from typing import Mapping

import numpy as np

from .tensor import Tensor


def adamw_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: dict[str, dict[str, np.ndarray]],
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    weight_decay: float = 0.0,
    t: int = 1,
    eps: float = 1e-8,
) -> None:
    """One AdamW update (decoupled weight decay, bias-corrected moments).

    ``state`` maps parameter name to its ``{"m", "v"}`` moment buffers and is
    created lazily. ``t`` is the 1-based step count used for bias correction.
    """
    b1, b2 = betas
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        st = state.get(name)
        if st is None:
            st = state[name] = {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}
        m, v = st["m"], st["v"]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype, copy=False)


class AdamW:
    """Stateful wrapper around :func:`adamw_step` for a named parameter dict."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-4, betas=(0.9, 0.999),
                 weight_decay: float = 5e-3, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.weight_decay = weight_decay
        self.eps = eps
        self.t = 0
        self.state: dict[str, dict[str, np.ndarray]] = {}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        adamw_step(self.params, grads, self.state, self.lr, self.betas, self.weight_decay, self.t, self.eps)
