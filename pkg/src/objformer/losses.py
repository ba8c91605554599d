"""Training objectives for binary and semantic change detection.

Label conventions: ``y_bcd`` is 0 (unchanged), 1 (changed) or 255
(background); land-cover labels use 0 for background/unknown and
``1..C`` for the foreground classes. Background never contributes to any
loss. Land-cover logits carry ``C + 1`` channels; channel 0 (background)
is excluded and the softmax runs over the ``C`` foreground channels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import ops
from .autograd.tensor import DimensionError, Tensor

BACKGROUND = 255
CCE_EPS = 1e-7


def bcd_loss(logits: Tensor, y_bcd: np.ndarray, ignore_label: int = BACKGROUND) -> Tensor:
    """Mean cross-entropy of the 2-class change logits over non-background pixels."""
    return ops.cross_entropy(logits, y_bcd, ignore_label)


def foreground_logits(lcm_logits: Tensor) -> Tensor:
    return ops.slice_(lcm_logits, (slice(None), slice(1, None)))


def foreground_probs(lcm_logits: Tensor) -> Tensor:
    """Softmax over the foreground channels, (B, C, H, W)."""
    return ops.softmax(foreground_logits(lcm_logits), axis=1)


def lcm_loss(lcm_logits: Tensor, labels: np.ndarray) -> Tensor:
    """Cross-entropy over foreground classes; label 0 is ignored."""
    labels = np.asarray(labels)
    target = np.where(labels > 0, labels - 1, -1)
    return ops.cross_entropy(foreground_logits(lcm_logits), target, ignore_label=-1)


def lcm_losses(lcm_osm: Tensor, y_osm: np.ndarray, lcm_opt: Tensor, y_opt_partial: np.ndarray) -> tuple[Tensor, Tensor]:
    """Map-branch loss against ``y_osm`` and optical-branch loss against the
    partial labels (unchanged pixels only)."""
    return lcm_loss(lcm_osm, y_osm), lcm_loss(lcm_opt, y_opt_partial)


def cce_loss(probs: Tensor, y_osm: np.ndarray, y_bcd: np.ndarray, eps: float = CCE_EPS) -> Tensor:
    """Converse cross-entropy: at changed pixels the optical class cannot be
    the map class, so penalise ``-log(1 - p[y_osm])``.

    ``probs`` are foreground probabilities (B, C, H, W) for classes 1..C.
    The mean is taken over changed, non-background pixels; with none the
    loss is 0.
    """
    y_osm = np.asarray(y_osm)
    y_bcd = np.asarray(y_bcd)
    b, c, h, w = probs.shape
    if y_osm.shape != (b, h, w) or y_bcd.shape != (b, h, w):
        raise DimensionError(f"cce_loss: labels {y_osm.shape}/{y_bcd.shape} vs probs {probs.shape}")
    changed = (y_bcd == 1) & (y_osm > 0)
    count = int(changed.sum())
    onehot = np.zeros((b, c, h, w), dtype=probs.dtype)
    bi, yi, xi = np.nonzero(changed)
    onehot[bi, y_osm[bi, yi, xi] - 1, yi, xi] = 1.0
    p_map = ops.sum_(ops.mul_const(probs, onehot), axis=1)
    q = ops.add_scalar(ops.neg(ops.clamp_max(p_map, 1.0 - eps)), 1.0)
    total = ops.sum_(ops.mul_const(ops.log(q), changed.astype(probs.dtype)))
    return ops.scale(total, -1.0 / count) if count else ops.scale(total, 0.0)


@dataclass
class LossBundle:
    l_bcd: Tensor
    l_lcm_osm: Tensor
    l_lcm_opt: Tensor
    l_cce: Tensor
    l_total: Tensor

    def values(self) -> dict[str, float]:
        return {k: float(getattr(self, k).data) for k in ("l_bcd", "l_lcm_osm", "l_lcm_opt", "l_cce", "l_total")}


def scd_total(l_bcd: Tensor, l_lcm_osm: Tensor, l_lcm_opt: Tensor, l_cce: Tensor, use_cce: bool = True) -> LossBundle:
    """Unit-weight sum of the four terms; ``use_cce=False`` drops the CCE term
    from the total (ablation) while still reporting its value."""
    total = ops.add(ops.add(l_bcd, l_lcm_osm), l_lcm_opt)
    if use_cce:
        total = ops.add(total, l_cce)
    return LossBundle(l_bcd, l_lcm_osm, l_lcm_opt, l_cce, total)


def scd_losses(outputs, y_bcd: np.ndarray, y_osm: np.ndarray, y_opt_partial: np.ndarray,
               use_cce: bool = True) -> LossBundle:
    logits, lcm_osm, lcm_opt = outputs
    l_bcd = bcd_loss(logits, y_bcd)
    l_osm, l_opt = lcm_losses(lcm_osm, y_osm, lcm_opt, y_opt_partial)
    l_cce = cce_loss(foreground_probs(lcm_opt), y_osm, y_bcd)
    return scd_total(l_bcd, l_osm, l_opt, l_cce, use_cce)
