"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-5) -> np.ndarray:
    """d fn() / d t by central differences, perturbing ``t.data`` in place."""
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn().data)
        flat[i] = orig - h
        fm = float(fn().data)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Elementwise ``|a - n| / max(|a|, |n|, scale_floor)``, maximised.

    The floor scales with the largest gradient magnitude so entries that are
    analytically zero do not blow the ratio up with round-off.
    """
    scale = max(float(np.max(np.abs(numeric), initial=0.0)), float(np.max(np.abs(analytic), initial=0.0)))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), max(floor, 1e-3 * scale))
    return float(np.max(np.abs(analytic - numeric) / denom, initial=0.0))


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max relative error between backprop and finite differences over ``inputs``.

    ``fn`` must return a scalar tensor and be a pure function of the inputs'
    data; inputs should be float64 with ``requires_grad=True``.
    """
    for t in inputs:
        t.grad = None
    out = fn()
    out.backward()
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numerical_grad(fn, t, h)
        worst = max(worst, max_rel_error(analytic, numeric))
    return worst
