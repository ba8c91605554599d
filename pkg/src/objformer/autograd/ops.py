"""Differentiable primitives.

Shapes are explicit: binary elementwise ops require identical shapes, and
the only broadcast is :func:`add_bias` along one axis. Layout is NCHW for
images and (..., tokens, channels) for token sets.
"""

from __future__ import annotations

import contextlib
import math
import threading
import warnings
from typing import Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DimensionError, Tensor


class ConfigurationError(ValueError):
    """Raised for invalid layer/op configuration (kernel, stride, sizes)."""


class EmptyMaskWarning(UserWarning):
    """A masked loss had no contributing elements and evaluated to 0."""


# ---------------------------------------------------------------------------
# MAC instrumentation: matmul and convolution kernels report their
# multiply-accumulates to every active counter.

_mac_state = threading.local()


class MacCounter:
    def __init__(self) -> None:
        self.total = 0
        self.by_op: dict[str, int] = {}

    def add(self, op: str, n: int) -> None:
        self.total += int(n)
        self.by_op[op] = self.by_op.get(op, 0) + int(n)


@contextlib.contextmanager
def count_macs() -> Iterator[MacCounter]:
    counter = MacCounter()
    stack = getattr(_mac_state, "stack", None)
    if stack is None:
        stack = _mac_state.stack = []
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.remove(counter)


def _report_macs(op: str, n: int) -> None:
    for c in getattr(_mac_state, "stack", ()):
        c.add(op, n)


def _tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return Tensor._make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return Tensor._make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return Tensor._make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Multiply by a constant array of the same shape (masks, one-hots)."""
    c = np.asarray(c, dtype=a.dtype)
    if c.shape != a.shape:
        raise DimensionError(f"mul_const: shape mismatch {a.shape} vs {c.shape}")
    return Tensor._make(a.data * c, (a,), lambda g: (g * c,), "mul_const")


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return Tensor._make(a.data * a.dtype.type(s), (a,), lambda g: (g * a.dtype.type(s),), "scale")


def add_scalar(a: Tensor, s: float) -> Tensor:
    return Tensor._make(a.data + a.dtype.type(s), (a,), lambda g: (g,), "add_scalar")


def add_bias(x: Tensor, b: Tensor, axis: int = 1) -> Tensor:
    """``x + b`` with ``b`` (1-d) broadcast along ``axis``."""
    ax = _axis(axis, x.ndim)
    if b.ndim != 1 or b.shape[0] != x.shape[ax]:
        raise DimensionError(f"add_bias: bias {b.shape} does not match axis {ax} of {x.shape}")
    view = [1] * x.ndim
    view[ax] = -1
    others = tuple(i for i in range(x.ndim) if i != ax)
    return Tensor._make(x.data + b.data.reshape(view), (x, b), lambda g: (g, g.sum(axis=others)), "add_bias")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return Tensor._make(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    return Tensor._make(np.log(x), (a,), lambda g: (g / x,), "log")


def clamp_max(a: Tensor, value: float) -> Tensor:
    keep = a.data <= value
    return Tensor._make(np.minimum(a.data, a.dtype.type(value)), (a,), lambda g: (g * keep,), "clamp_max")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def backward(g):
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * d,)

    return Tensor._make(y.astype(x.dtype, copy=False), (a,), backward, "gelu")


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    y = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(np.asarray(y, dtype=a.dtype), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum_(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose: invalid axes {axes} for {a.ndim}-d tensor")
    inv = tuple(np.argsort(axes))
    return Tensor._make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ax = _axis(axis, tensors[0].ndim)
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), backward, "concat")


def slice_(a: Tensor, index) -> Tensor:
    shape = a.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[index] = g
        return (out,)

    return Tensor._make(a.data[index], (a,), backward, "slice")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., M, K).

    ``b`` is either (K, N), a weight shared over the leading dims of ``a``,
    or (..., K, N) with leading dims identical to ``a``'s.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dims differ {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2:
        k, n = bd.shape
        a2 = ad.reshape(-1, k)
        y = (a2 @ bd).reshape(ad.shape[:-1] + (n,))
        _report_macs("matmul", a2.shape[0] * k * n)

        def backward(g):
            g2 = g.reshape(-1, n)
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return Tensor._make(y, (a, b), backward, "matmul")
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: leading dims differ {a.shape} @ {b.shape}")
    y = ad @ bd
    _report_macs("matmul", int(np.prod(ad.shape[:-1])) * ad.shape[-1] * bd.shape[-1])

    def backward(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return Tensor._make(y, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Token-wise affine map; ``w`` is (in, out)."""
    y = matmul(x, w)
    return add_bias(y, b, axis=-1) if b is not None else y


# ---------------------------------------------------------------------------
# convolutions (cross-correlation, NCHW)


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    # floor convention: a 7x7/s4/p3 kernel maps 512 -> 128
    span = n + 2 * pad - k
    if span < 0 or stride < 1:
        raise ConfigurationError(f"conv: kernel {k} (pad {pad}, stride {stride}) does not fit size {n}")
    return span // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects NCHW input and OCkk weight, got {x.shape}, {w.shape}")
    bsz, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c or kh != kw:
        raise DimensionError(f"conv2d: weight {w.shape} incompatible with input {x.shape}")
    k = kh
    ho, wo = _out_size(h, k, stride, pad), _out_size(wd, k, stride, pad)
    xd, wdat = x.data, w.data

    if k == 1 and stride == 1 and pad == 0:
        x2 = xd.transpose(1, 0, 2, 3).reshape(c, -1)
        w2 = wdat.reshape(o, c)
        y = (w2 @ x2).reshape(o, bsz, h, wd).transpose(1, 0, 2, 3)
        _report_macs("conv2d", o * c * bsz * h * wd)

        def backward1(g):
            g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
            gx = (w2.T @ g2).reshape(c, bsz, h, wd).transpose(1, 0, 2, 3)
            gw = (g2 @ x2.T).reshape(o, c, 1, 1)
            return gx, gw

        out = Tensor._make(np.ascontiguousarray(y), (x, w), backward1, "conv2d")
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
        cols = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        y = np.tensordot(cols, wdat, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        _report_macs("conv2d", o * c * k * k * bsz * ho * wo)

        def backwardk(g):
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
            dcols = np.tensordot(g, wdat, axes=([1], [0]))  # B,Ho,Wo,C,k,k
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
            return np.ascontiguousarray(gx), gw

        out = Tensor._make(np.ascontiguousarray(y), (x, w), backwardk, "conv2d")
    return add_bias(out, b, axis=1) if b is not None else out


def depthwise_conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, pad: int = 1) -> Tensor:
    """Per-channel k x k convolution, stride 1; ``w`` is (C, k, k)."""
    bsz, c, h, wd = x.shape
    if w.ndim != 3 or w.shape[0] != c or w.shape[1] != w.shape[2]:
        raise DimensionError(f"depthwise_conv2d: weight {w.shape} incompatible with input {x.shape}")
    k = w.shape[1]
    ho, wo = _out_size(h, k, 1, pad), _out_size(wd, k, 1, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    wdat = w.data
    y = np.zeros((bsz, c, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            y += wdat[None, :, i, j, None, None] * xp[:, :, i : i + ho, j : j + wo]
    _report_macs("depthwise_conv2d", c * k * k * bsz * ho * wo)

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        gw = np.empty(wdat.shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + ho, j : j + wo] += wdat[None, :, i, j, None, None] * g
                gw[:, i, j] = np.einsum("bchw,bchw->c", g, xp[:, :, i : i + ho, j : j + wo])
        gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        return np.ascontiguousarray(gx), gw

    out = Tensor._make(y, (x, w), backward, "depthwise_conv2d")
    return add_bias(out, b, axis=1) if b is not None else out


# ---------------------------------------------------------------------------
# normalisation / attention core


def softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Numerically stable softmax; ``mask`` (broadcastable, True = keep)
    excludes entries, which then get probability 0."""
    ax = _axis(axis, x.ndim)
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(mask, z.shape)
        z = np.where(mask, z, -np.inf)
    zmax = np.max(z, axis=ax, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.exp(z - zmax)
    s = e.sum(axis=ax, keepdims=True)
    y = (e / np.where(s > 0, s, 1.0)).astype(x.dtype, copy=False)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=ax, keepdims=True)),)

    return Tensor._make(y, (x,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6, axis: int = -1) -> Tensor:
    """Normalise over ``axis`` (the channel axis), then scale and shift."""
    ax = _axis(axis, x.ndim)
    n = x.shape[ax]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise DimensionError(f"layer_norm: affine params {gamma.shape}/{beta.shape} vs channels {n}")
    view = [1] * x.ndim
    view[ax] = n
    others = tuple(i for i in range(x.ndim) if i != ax)
    xd = x.data
    mu = xd.mean(axis=ax, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gamma.data.reshape(view)
    y = xhat * gv + beta.data.reshape(view)

    def backward(g):
        dxhat = g * gv
        dx = inv * (dxhat - dxhat.mean(axis=ax, keepdims=True) - xhat * (dxhat * xhat).mean(axis=ax, keepdims=True))
        return dx, (g * xhat).sum(axis=others), g.sum(axis=others)

    return Tensor._make(y.astype(xd.dtype, copy=False), (x, gamma, beta), backward, "layer_norm")


# ---------------------------------------------------------------------------
# resampling


def nearest_upsample(x: Tensor, factor: int) -> Tensor:
    f = int(factor)
    bsz, c, h, w = x.shape
    y = np.repeat(np.repeat(x.data, f, axis=2), f, axis=3)

    def backward(g):
        return (g.reshape(bsz, c, h, f, w, f).sum(axis=(3, 5)),)

    return Tensor._make(y, (x,), backward, "nearest_upsample")


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    # half-pixel centres, edge clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in), dtype=dtype)
    np.add.at(m, (np.arange(n_out), i0), 1.0 - frac)
    np.add.at(m, (np.arange(n_out), i1), frac)
    return m


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    f = int(factor)
    bsz, c, h, w = x.shape
    mh = _interp_matrix(h, h * f, x.dtype)
    mw = _interp_matrix(w, w * f, x.dtype)
    y = np.einsum("oh,bchw,pw->bcop", mh, x.data, mw, optimize=True)

    def backward(g):
        return (np.einsum("oh,bcop,pw->bchw", mh, g, mw, optimize=True),)

    return Tensor._make(y, (x,), backward, "bilinear_upsample")


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, target: np.ndarray, ignore_label: Optional[int] = None) -> Tensor:
    """Mean negative log-likelihood over non-ignored positions.

    ``logits`` is (B, C, ...) and ``target`` (B, ...) integer labels. When no
    position contributes the result is 0 (with zero gradient) and an
    :class:`EmptyMaskWarning` is emitted.
    """
    target = np.asarray(target)
    if logits.ndim < 2 or target.shape != (logits.shape[0],) + logits.shape[2:]:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs target {target.shape}")
    ncls = logits.shape[1]
    valid = np.ones(target.shape, dtype=bool) if ignore_label is None else target != ignore_label
    if np.any((target[valid] < 0) | (target[valid] >= ncls)):
        raise DimensionError(f"cross_entropy: target labels outside [0, {ncls})")
    count = int(valid.sum())
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)) + zmax
    logp = z - lse
    safe_t = np.where(valid, target, 0)
    picked = np.take_along_axis(logp, safe_t[:, None], axis=1)[:, 0]
    if count == 0:
        warnings.warn("cross_entropy: every position is ignored; loss defined as 0", EmptyMaskWarning, stacklevel=2)
        loss = 0.0
    else:
        loss = -float(picked[valid].sum()) / count

    def backward(g):
        if count == 0:
            return (np.zeros_like(z),)
        p = np.exp(logp)
        onehot = np.zeros_like(z)
        np.put_along_axis(onehot, safe_t[:, None], 1.0, axis=1)
        d = (p - onehot) * valid[:, None]
        return (d * (g / count),)

    return Tensor._make(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")
