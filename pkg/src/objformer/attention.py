"""Object-guided attention.

Pixel features are pooled into one token per object of a guiding label
map, attention runs over those tokens only, and the refined tokens are
scattered back onto the pixels of their objects. All functions accept a
single sample (``C x H x W`` features, ``H x W`` map) or a batch
(``B x C x H x W``, ``B x H x W``). Batched token sets are padded to the
largest object count in the batch; padded keys are masked out of every
softmax and padded queries are never reassigned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autograd import ops
from .autograd.ops import ConfigurationError
from .autograd.tensor import DimensionError, Tensor

FUSIONS = ("mean", "max", "min", "mean+max")


@dataclass
class TokenSet:
    tokens: Tensor  # (B, N, C), or (N, C) when built from a single sample
    counts: np.ndarray  # objects per sample, shape (B,)
    labels: np.ndarray  # guiding maps, (B, H, W)
    batched: bool

    @property
    def source_shape(self) -> tuple[int, int]:
        return self.labels.shape[1], self.labels.shape[2]

    @property
    def key_mask(self) -> np.ndarray:
        n = self.tokens.shape[-2]
        return np.arange(n)[None, :] < self.counts[:, None]


def _batch_inputs(feat: Tensor, labels: np.ndarray) -> tuple[Tensor, np.ndarray, bool]:
    labels = np.asarray(labels)
    if feat.ndim == 3:
        if labels.ndim != 2:
            raise DimensionError(f"single-sample features need a 2-d map, got {labels.shape}")
        return ops.reshape(feat, (1,) + feat.shape), labels[None], False
    if feat.ndim != 4 or labels.ndim != 3:
        raise DimensionError(f"expected (B,C,H,W) features and (B,H,W) maps, got {feat.shape}, {labels.shape}")
    return feat, labels, True


def _assignment(labels: np.ndarray, dtype) -> tuple[np.ndarray, np.ndarray]:
    """One-hot assignment (B, N, HW) and per-sample object counts."""
    b = labels.shape[0]
    flat = labels.reshape(b, -1)
    counts = flat.max(axis=1) + 1
    n = int(counts.max())
    onehot = np.zeros((b, n, flat.shape[1]), dtype=dtype)
    bi = np.repeat(np.arange(b), flat.shape[1])
    pi = np.tile(np.arange(flat.shape[1]), b)
    onehot[bi, flat.ravel(), pi] = 1.0
    return onehot, counts


def _pool_mean(x: Tensor, onehot: np.ndarray) -> Tensor:
    # x: (B, C, HW) -> (B, N, C)
    sizes = onehot.sum(axis=2, keepdims=True)
    inv = 1.0 / np.maximum(sizes, 1.0)
    y = (onehot @ np.swapaxes(x.data, 1, 2)) * inv

    def backward(g):
        return (np.swapaxes(np.swapaxes(onehot, 1, 2) @ (g * inv), 1, 2),)

    return Tensor._make(y, (x,), backward, "pool_mean")


def _pool_extreme(x: Tensor, labels: np.ndarray, n: int, kind: str) -> Tensor:
    b, c, hw = x.shape
    xs = np.swapaxes(x.data, 1, 2).reshape(b * hw, c)
    idx = (np.arange(b)[:, None] * n + labels.reshape(b, hw)).ravel()
    fill = -np.inf if kind == "max" else np.inf
    out = np.full((b * n, c), fill, dtype=x.dtype)
    (np.maximum if kind == "max" else np.minimum).at(out, idx, xs)
    # gradient goes to the first flat pixel index attaining the extreme
    hit = xs == out[idx]
    pos = np.where(hit, np.arange(b * hw)[:, None], b * hw)
    first = np.full((b * n, c), b * hw, dtype=np.int64)
    np.minimum.at(first, idx, pos)
    valid = first < b * hw
    y = np.where(valid, out, 0.0).astype(x.dtype).reshape(b, n, c)

    def backward(g):
        gx = np.zeros((b * hw, c), dtype=g.dtype)
        tok, ch = np.nonzero(valid)
        gx[first[tok, ch], ch] = g.reshape(b * n, c)[tok, ch]
        return (np.swapaxes(gx.reshape(b, hw, c), 1, 2),)

    return Tensor._make(y, (x,), backward, f"pool_{kind}")


def pool_tokens(feat: Tensor, labels, fusion: str = "mean") -> TokenSet:
    """Fuse the pixels of each object into a token, channel by channel."""
    if fusion not in FUSIONS:
        raise ConfigurationError(f"unknown fusion {fusion!r}; choose from {FUSIONS}")
    labels = getattr(labels, "labels", labels)
    feat_b, lab, batched = _batch_inputs(feat, labels)
    b, c, h, w = feat_b.shape
    if lab.shape != (b, h, w):
        raise DimensionError(f"map shape {lab.shape[1:]} does not match feature map {(h, w)}")
    x = ops.reshape(feat_b, (b, c, h * w))
    onehot, counts = _assignment(lab, feat.dtype)
    n = onehot.shape[1]
    if fusion == "mean":
        tok = _pool_mean(x, onehot)
    elif fusion in ("max", "min"):
        tok = _pool_extreme(x, lab, n, fusion)
    else:
        tok = ops.add(_pool_mean(x, onehot), _pool_extreme(x, lab, n, "max"))
    if not batched:
        tok = ops.reshape(tok, (n, c))
    return TokenSet(tok, counts, lab, batched)


def reassign(tokens: Tensor, labels, batched: Optional[bool] = None) -> Tensor:
    """Scatter tokens back onto the grid: pixel (i, j) gets the token of its label."""
    labels = np.asarray(getattr(labels, "labels", labels))
    if batched is None:
        batched = tokens.ndim == 3
    if not batched:
        tokens = ops.reshape(tokens, (1,) + tokens.shape)
        labels = labels[None]
    b, n, c = tokens.shape
    if labels.ndim != 3 or labels.shape[0] != b:
        raise DimensionError(f"map batch {labels.shape} does not match tokens {tokens.shape}")
    h, w = labels.shape[1:]
    if int(labels.max()) + 1 > n:
        raise DimensionError(f"map has {int(labels.max()) + 1} objects but only {n} tokens given")
    if not batched and int(labels.max()) + 1 != n:
        raise DimensionError(f"token count {n} != object count {int(labels.max()) + 1}")
    flat = labels.reshape(b, h * w)
    bi = np.arange(b)[:, None]
    td = tokens.data
    y = np.swapaxes(td[bi, flat], 1, 2).reshape(b, c, h, w)

    def backward(g):
        onehot = np.zeros((b, n, h * w), dtype=g.dtype)
        onehot[np.repeat(np.arange(b), h * w), flat.ravel(), np.tile(np.arange(h * w), b)] = 1.0
        return (onehot @ np.swapaxes(g.reshape(b, c, h * w), 1, 2),)

    out = Tensor._make(np.ascontiguousarray(y), (tokens,), backward, "reassign")
    return out if batched else ops.reshape(out, (c, h, w))


# ---------------------------------------------------------------------------
# weights


def _init_linear(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> tuple[Tensor, Tensor]:
    w = Tensor(np.clip(rng.normal(0.0, 0.02, (fan_in, fan_out)), -0.04, 0.04).astype(dtype), requires_grad=True)
    return w, Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True)


@dataclass
class AttentionWeights:
    """Q/K/V/output projections, stored (in, out), with biases."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    heads: int

    @classmethod
    def init(cls, channels: int, heads: int, rng: np.random.Generator, dtype=np.float32) -> "AttentionWeights":
        if channels % heads:
            raise ConfigurationError(f"channels {channels} not divisible by heads {heads}")
        parts = [x for _ in range(4) for x in _init_linear(rng, channels, channels, dtype)]
        return cls(*parts, heads=heads)

    def named(self) -> dict[str, Tensor]:
        return {k: getattr(self, k) for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}


@dataclass
class CrossAttentionWeights:
    """Projections for map/optical cross-attention.

    Queries and map-side values come from map tokens (``c_map`` wide); keys
    and optical-side values from optical tokens (``c_opt`` wide). Both
    refined outputs are projected back to their own branch width.
    """

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv_osm: Tensor
    bv_osm: Tensor
    wv_opt: Tensor
    bv_opt: Tensor
    wo_map: Tensor
    bo_map: Tensor
    wo_opt: Tensor
    bo_opt: Tensor
    heads: int

    @classmethod
    def init(cls, c_map: int, c_opt: int, dim: int, heads: int, rng: np.random.Generator,
             dtype=np.float32) -> "CrossAttentionWeights":
        if dim % heads:
            raise ConfigurationError(f"attention dim {dim} not divisible by heads {heads}")
        shapes = [(c_map, dim), (c_opt, dim), (c_map, dim), (c_opt, dim), (dim, c_map), (dim, c_opt)]
        parts = [x for fi, fo in shapes for x in _init_linear(rng, fi, fo, dtype)]
        return cls(*parts, heads=heads)

    def named(self) -> dict[str, Tensor]:
        keys = ("wq", "bq", "wk", "bk", "wv_osm", "bv_osm", "wv_opt", "bv_opt", "wo_map", "bo_map", "wo_opt", "bo_opt")
        return {k: getattr(self, k) for k in keys}


# ---------------------------------------------------------------------------
# attention over token sets


def _split_heads(t: Tensor, heads: int) -> Tensor:
    b, n, d = t.shape
    return ops.transpose(ops.reshape(t, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(t: Tensor) -> Tensor:
    b, h, n, dh = t.shape
    return ops.reshape(ops.transpose(t, (0, 2, 1, 3)), (b, n, h * dh))


def _scores(q: Tensor, k: Tensor, heads: int) -> Tensor:
    """Scaled dot products (B, h, Nq, Nk)."""
    qh, kh = _split_heads(q, heads), _split_heads(k, heads)
    dh = q.shape[-1] // heads
    return ops.scale(ops.matmul(qh, ops.transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))


def _attend(probs: Tensor, v: Tensor, heads: int) -> Tensor:
    return _merge_heads(ops.matmul(probs, _split_heads(v, heads)))


def token_self_attention(tokens: Tensor, key_mask: np.ndarray, w: AttentionWeights) -> tuple[Tensor, Tensor]:
    """Multi-head self-attention over (B, N, C) tokens; returns (out, probs)."""
    c = tokens.shape[-1]
    if c % w.heads:
        raise ConfigurationError(f"channels {c} not divisible by heads {w.heads}")
    q = ops.linear(tokens, w.wq, w.bq)
    k = ops.linear(tokens, w.wk, w.bk)
    v = ops.linear(tokens, w.wv, w.bv)
    probs = ops.softmax(_scores(q, k, w.heads), axis=-1, mask=key_mask[:, None, None, :])
    return ops.linear(_attend(probs, v, w.heads), w.wo, w.bo), probs


def object_self_attention(feat: Tensor, labels, w: AttentionWeights, fusion: str = "mean",
                          return_probs: bool = False):
    """pool -> Q, K, V -> softmax(QK^T / sqrt(d_h)) V -> W_O -> reassign."""
    c = feat.shape[-3]
    if c % w.heads:
        raise ConfigurationError(f"channels {c} not divisible by heads {w.heads}")
    ts = pool_tokens(feat, labels, fusion)
    tok = ts.tokens if ts.batched else ops.reshape(ts.tokens, (1,) + ts.tokens.shape)
    out, probs = token_self_attention(tok, ts.key_mask, w)
    y = reassign(out, ts.labels, batched=True)
    if not ts.batched:
        y = ops.reshape(y, y.shape[1:])
    return (y, probs) if return_probs else y


def object_cross_attention(feat_map: Tensor, instance_map, feat_opt: Tensor, object_map,
                           w: CrossAttentionWeights, fusion: str = "mean", return_probs: bool = False):
    """Cross-attention between map-data instance tokens and optical object tokens.

    ``A = softmax(Q K^T / sqrt(d_h))`` (instances x objects) refines the map
    branch with optical values; the transposed scores, normalised over
    instances, refine the optical branch with map values. Each refined token
    set is reassigned through its own guiding map.
    """
    ts_m = pool_tokens(feat_map, instance_map, fusion)
    ts_o = pool_tokens(feat_opt, object_map, fusion)
    if ts_m.batched != ts_o.batched:
        raise DimensionError("map and optical inputs must both be batched or both single")
    tm = ts_m.tokens if ts_m.batched else ops.reshape(ts_m.tokens, (1,) + ts_m.tokens.shape)
    to = ts_o.tokens if ts_o.batched else ops.reshape(ts_o.tokens, (1,) + ts_o.tokens.shape)
    q = ops.linear(tm, w.wq, w.bq)
    k = ops.linear(to, w.wk, w.bk)
    v_osm = ops.linear(tm, w.wv_osm, w.bv_osm)
    v_opt = ops.linear(to, w.wv_opt, w.bv_opt)
    s = _scores(q, k, w.heads)  # (B, h, N_ins, N_obj)
    a_map = ops.softmax(s, axis=-1, mask=ts_o.key_mask[:, None, None, :])
    a_opt = ops.softmax(ops.transpose(s, (0, 1, 3, 2)), axis=-1, mask=ts_m.key_mask[:, None, None, :])
    r_map = ops.linear(_attend(a_map, v_opt, w.heads), w.wo_map, w.bo_map)
    r_opt = ops.linear(_attend(a_opt, v_osm, w.heads), w.wo_opt, w.bo_opt)
    y_map = reassign(r_map, ts_m.labels, batched=True)
    y_opt = reassign(r_opt, ts_o.labels, batched=True)
    if not ts_m.batched:
        y_map = ops.reshape(y_map, y_map.shape[1:])
        y_opt = ops.reshape(y_opt, y_opt.shape[1:])
    if return_probs:
        return y_map, y_opt, a_map, a_opt
    return y_map, y_opt


# ---------------------------------------------------------------------------
# closed-form MAC accounting (projections + score matrix + value aggregation)

ATTENTION_MODES = ("vanilla", "spatial_reduction", "object_guided")


def attention_mac_terms(mode: str, h: int, w: int, channels: int, heads: int = 1,
                        n_tokens: Optional[int] = None, reduction: int = 1) -> dict[str, int]:
    """Per-term MAC counts of one self-attention layer on an ``h x w`` map.

    ``vanilla`` attends between all pixels; ``spatial_reduction`` shrinks
    keys/values with an ``R x R``, stride-``R`` convolution; ``object_guided``
    attends between ``n_tokens`` object tokens. Head count does not change
    the totals (heads split the channel dimension).
    """
    if min(h, w, channels, heads) <= 0:
        raise ConfigurationError("dimensions must be positive")
    c = channels
    hw = h * w
    if mode == "vanilla":
        n = m = hw
        proj = 4 * n * c * c
        extra = 0
    elif mode == "spatial_reduction":
        r = max(1, int(reduction))
        n = hw
        m = (h // r) * (w // r)
        extra = m * c * c * r * r if r > 1 else 0
        proj = 2 * n * c * c + 2 * m * c * c
    elif mode == "object_guided":
        if n_tokens is None or n_tokens <= 0:
            raise ConfigurationError("object_guided mode needs n_tokens > 0")
        n = m = int(n_tokens)
        proj = 4 * n * c * c
        extra = 0
    else:
        raise ConfigurationError(f"unknown attention mode {mode!r}")
    return {"projection": proj, "reduction": extra, "scores": n * m * c, "aggregation": n * m * c}


def count_attention_macs(mode: str, h: int, w: int, channels: int, heads: int = 1,
                         n_tokens: Optional[int] = None, reduction: int = 1) -> int:
    return sum(attention_mac_terms(mode, h, w, channels, heads, n_tokens, reduction).values())


def cross_attention_macs(n_ins: int, n_obj: int, c_map: int, c_opt: int, dim: int) -> int:
    """MACs of :func:`object_cross_attention` at batch 1 (scores computed once)."""
    proj = n_ins * c_map * dim * 2 + n_obj * c_opt * dim * 2
    scores = n_ins * n_obj * dim
    agg = 2 * n_ins * n_obj * dim
    out = n_ins * dim * c_map + n_obj * dim * c_opt
    return proj + scores + agg + out
