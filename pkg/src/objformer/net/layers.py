"""Parameterised building blocks on top of the autograd ops."""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from ..attention import AttentionWeights, CrossAttentionWeights, object_cross_attention, object_self_attention
from ..autograd import ops
from ..autograd.tensor import Tensor


class Module:
    """Registers parameters and sub-modules in assignment order."""

    def __init__(self) -> None:
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for k, v in self._params.items():
            out[prefix + k] = v
        for k, m in self._children.items():
            out.update(m.named_parameters(f"{prefix}{k}."))
        return out

    def modules(self) -> Iterator["Module"]:
        yield self
        for m in self._children.values():
            yield from m.modules()

    def param_count(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (f64 for gradient checks)."""
        for m in self.modules():
            for k, p in list(m._params.items()):
                p.data = p.data.astype(dtype)
                p.grad = None
        return self


class ModuleList(Module):
    def __init__(self, items=()):
        super().__init__()
        self._items: list[Module] = []
        for m in items:
            self.append(m)

    def append(self, m: Module) -> None:
        setattr(self, str(len(self._items)), m)
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr, requires_grad=True)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, pad: int = 0, bias: bool = True,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.stride, self.pad, self.k, self.cin, self.cout = stride, pad, k, cin, cout
        fan_in = k * k * cin  # variance-preserving init keeps the norm-free decoder stable
        self.weight = _param(rng.normal(0.0, math.sqrt(1.0 / fan_in), (cout, cin, k, k)).astype(dtype))
        self.bias = _param(np.zeros(cout, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.pad)

    def macs(self, h_out: int, w_out: int) -> int:
        return self.cout * self.cin * self.k * self.k * h_out * w_out


class DepthwiseConv2d(Module):
    def __init__(self, channels: int, k: int = 3, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.channels, self.k = channels, k
        self.weight = _param(rng.normal(0.0, math.sqrt(1.0 / (k * k)), (channels, k, k)).astype(dtype))
        self.bias = _param(np.zeros(channels, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.depthwise_conv2d(x, self.weight, self.bias, pad=self.k // 2)

    def macs(self, h: int, w: int) -> int:
        return self.channels * self.k * self.k * h * w


class LayerNorm2d(Module):
    """Layer norm over the channel axis of an NCHW map."""

    def __init__(self, channels: int, eps: float = 1e-6, dtype=np.float32):
        super().__init__()
        self.eps = eps
        self.weight = _param(np.ones(channels, dtype=dtype))
        self.bias = _param(np.zeros(channels, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.weight, self.bias, self.eps, axis=1)


class MixFFN(Module):
    """1x1 expand -> 3x3 depthwise conv -> GELU -> 1x1 project.

    The depthwise conv is the only source of positional information.
    """

    def __init__(self, channels: int, ratio: int, rng, dtype=np.float32):
        super().__init__()
        hidden = channels * ratio
        self.fc1 = Conv2d(channels, hidden, 1, rng=rng, dtype=dtype)
        self.dw = DepthwiseConv2d(hidden, 3, rng=rng, dtype=dtype)
        self.fc2 = Conv2d(hidden, channels, 1, rng=rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.dw(self.fc1(x))))

    def macs(self, h: int, w: int) -> int:
        return self.fc1.macs(h, w) + self.dw.macs(h, w) + self.fc2.macs(h, w)


class SelfAttention(Module):
    def __init__(self, channels: int, heads: int, rng, dtype=np.float32, fusion: str = "mean"):
        super().__init__()
        aw = AttentionWeights.init(channels, heads, rng, dtype)
        for k, v in aw.named().items():
            setattr(self, k, v)
        self.heads = heads
        self.channels = channels
        self.fusion = fusion

    @property
    def weights(self) -> AttentionWeights:
        return AttentionWeights(self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo, self.heads)

    def __call__(self, x: Tensor, labels: np.ndarray) -> Tensor:
        return object_self_attention(x, labels, self.weights, self.fusion)


class CrossAttention(Module):
    def __init__(self, c_map: int, c_opt: int, dim: int, heads: int, rng, dtype=np.float32, fusion: str = "mean"):
        super().__init__()
        cw = CrossAttentionWeights.init(c_map, c_opt, dim, heads, rng, dtype)
        for k, v in cw.named().items():
            setattr(self, k, v)
        self.heads, self.c_map, self.c_opt, self.dim, self.fusion = heads, c_map, c_opt, dim, fusion

    @property
    def weights(self) -> CrossAttentionWeights:
        return CrossAttentionWeights(**{k: getattr(self, k) for k in CrossAttentionWeights.__dataclass_fields__})

    def __call__(self, f_map: Tensor, inst: np.ndarray, f_opt: Tensor, obj: np.ndarray) -> tuple[Tensor, Tensor]:
        return object_cross_attention(f_map, inst, f_opt, obj, self.weights, self.fusion)
