"""The two-branch object-guided Transformer for map/image change detection."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..autograd import ops
from ..autograd.ops import ConfigurationError
from ..autograd.tensor import DimensionError, Tensor
from .config import ModelConfig
from .layers import Conv2d, CrossAttention, LayerNorm2d, MixFFN, Module, ModuleList, SelfAttention


class PatchEmbed(Module):
    """Strided overlapping convolution followed by channel layer norm.

    Stride 4 uses a 7x7 kernel (pad 3), stride 2 a 3x3 kernel (pad 1).
    """

    def __init__(self, cin: int, cout: int, stride: int, rng, dtype=np.float32):
        super().__init__()
        if stride == 4:
            k, pad = 7, 3
        elif stride == 2:
            k, pad = 3, 1
        elif stride == 1:
            k, pad = 3, 1
        else:
            raise ConfigurationError(f"unsupported patch stride {stride}")
        self.stride = stride
        self.proj = Conv2d(cin, cout, k, stride, pad, rng=rng, dtype=dtype)
        self.norm = LayerNorm2d(cout, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        if h % self.stride or w % self.stride:
            raise ConfigurationError(f"input {h}x{w} not divisible by patch stride {self.stride}")
        return self.norm(self.proj(x))


class EncoderBlock(Module):
    """x + attn(LN(x)), then x + FFN(LN(x)) (pre-norm residual wiring)."""

    def __init__(self, channels: int, heads: int, mlp_ratio: int, rng, dtype=np.float32, fusion: str = "mean"):
        super().__init__()
        self.norm1 = LayerNorm2d(channels, dtype=dtype)
        self.attn = SelfAttention(channels, heads, rng, dtype, fusion)
        self.norm2 = LayerNorm2d(channels, dtype=dtype)
        self.ffn = MixFFN(channels, mlp_ratio, rng, dtype)
        self.use_ffn = True

    def __call__(self, x: Tensor, labels: np.ndarray) -> Tensor:
        x = ops.add(x, self.attn(self.norm1(x), labels))
        if self.use_ffn:
            x = ops.add(x, self.ffn(self.norm2(x)))
        return x


class EncoderStage(Module):
    def __init__(self, cin: int, cout: int, stride: int, depth: int, heads: int, mlp_ratio: int, rng,
                 dtype=np.float32, fusion: str = "mean"):
        super().__init__()
        self.embed = PatchEmbed(cin, cout, stride, rng, dtype)
        self.blocks = ModuleList(EncoderBlock(cout, heads, mlp_ratio, rng, dtype, fusion) for _ in range(depth))
        self.norm = LayerNorm2d(cout, dtype=dtype)

    def run_blocks(self, x: Tensor, labels: np.ndarray) -> Tensor:
        for blk in self.blocks:
            x = blk(x, labels)
        return x

    def __call__(self, x: Tensor, labels: np.ndarray) -> Tensor:
        x = self.embed(x)
        if x.shape[2:] != labels.shape[1:]:
            raise DimensionError(f"guiding map {labels.shape[1:]} does not match stage features {x.shape[2:]}")
        return self.norm(self.run_blocks(x, labels))


class Encoder(Module):
    def __init__(self, cin: int, channels, depths, heads, strides, mlp_ratio, rng, dtype=np.float32, fusion="mean"):
        super().__init__()
        self.stages = ModuleList()
        prev = cin
        for c, d, h, s in zip(channels, depths, heads, strides):
            self.stages.append(EncoderStage(prev, c, s, d, h, mlp_ratio, rng, dtype, fusion))
            prev = c

    def __call__(self, x: Tensor, maps: Sequence[np.ndarray]) -> list[Tensor]:
        feats = []
        for stage, lab in zip(self.stages, maps):
            x = stage(x, lab)
            feats.append(x)
        return feats


class FusionBlock(Module):
    """Upsample the coarse feature x2, add the (projected) fine one, 3x3 smooth."""

    def __init__(self, cin: int, dim: int, rng, dtype=np.float32):
        super().__init__()
        self.proj = Conv2d(cin, dim, 1, rng=rng, dtype=dtype) if cin != dim else None
        self.conv = Conv2d(dim, dim, 3, 1, 1, rng=rng, dtype=dtype)
        self.cin, self.dim = cin, dim

    def __call__(self, coarse: Optional[Tensor], fine: Tensor) -> Tensor:
        f = self.proj(fine) if self.proj is not None else fine
        if coarse is not None:
            if coarse.shape[2] * 2 != f.shape[2] or coarse.shape[3] * 2 != f.shape[3]:
                raise DimensionError(f"fusion: coarse {coarse.shape} is not half of fine {f.shape}")
            f = ops.add(f, ops.bilinear_upsample(coarse, 2))
        return self.conv(f)


class SemanticDecoder(Module):
    """Four fusion blocks (coarse to fine) and a 1x1 classifier."""

    def __init__(self, channels: Sequence[int], dim: int, n_out: int, rng, dtype=np.float32):
        super().__init__()
        self.blocks = ModuleList(FusionBlock(c, dim, rng, dtype) for c in channels)
        self.classifier = Conv2d(dim, n_out, 1, rng=rng, dtype=dtype)

    def __call__(self, feats: Sequence[Tensor]) -> Tensor:
        x = None
        for i in reversed(range(len(feats))):
            x = self.blocks[i](x, feats[i])
        return self.classifier(x)


@dataclass
class Batch:
    """Network inputs: NCHW rasters plus per-stage guiding maps (B, H_l, W_l)."""

    x_osm: np.ndarray
    x_opt: np.ndarray
    instance_maps: list
    object_maps: list


class ObjFormer(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.enc_map = Encoder(3, cfg.map_channels, cfg.map_blocks, cfg.encoder_heads, cfg.strides,
                               cfg.mlp_ratio, rng, dtype, cfg.fusion)
        self.enc_opt = Encoder(3, cfg.opt_channels, cfg.opt_blocks, cfg.encoder_heads, cfg.strides,
                               cfg.mlp_ratio, rng, dtype, cfg.fusion)
        d = cfg.decoder_dim
        self.cross = ModuleList()
        self.fuse = ModuleList()
        for i in range(4):
            cm, co = cfg.map_channels[i], cfg.opt_channels[i]
            self.cross.append(CrossAttention(cm, co, cm, cfg.decoder_heads[3 - i], rng, dtype, cfg.fusion))
            self.fuse.append(Conv2d(cm + co, d, 1, rng=rng, dtype=dtype))
        # stage 4 starts the chain, so only stages 1-3 need a fusion block
        self.fusion_blocks = ModuleList(FusionBlock(d, d, rng, dtype) for _ in range(3))
        self.classifier = Conv2d(d, 2, 1, rng=rng, dtype=dtype)
        if cfg.task == "scd":
            n_out = cfg.n_classes_lcm + 1
            self.sem_map = SemanticDecoder(cfg.map_channels, cfg.semantic_dim, n_out, rng, dtype)
            self.sem_opt = SemanticDecoder(cfg.opt_channels, cfg.semantic_dim, n_out, rng, dtype)

    # -- encoder / decoder -------------------------------------------------
    def check_batch(self, batch: Batch) -> None:
        if batch.x_osm.shape != batch.x_opt.shape:
            raise DimensionError(f"paired rasters differ: {batch.x_osm.shape} vs {batch.x_opt.shape}")
        b, _, h, w = batch.x_osm.shape
        if h % self.cfg.total_stride or w % self.cfg.total_stride:
            raise ConfigurationError(f"input {h}x{w} not divisible by total stride {self.cfg.total_stride}")
        for s, im, om in zip(self.cfg.stage_strides(), batch.instance_maps, batch.object_maps):
            want = (b, h // s, w // s)
            if im.shape != want or om.shape != want:
                raise DimensionError(f"guiding maps {im.shape}/{om.shape} expected {want}")

    def encode(self, batch: Batch) -> tuple[list[Tensor], list[Tensor]]:
        self.check_batch(batch)
        dtype = self.classifier.weight.dtype
        x_osm = Tensor(batch.x_osm.astype(dtype, copy=False))
        x_opt = Tensor(batch.x_opt.astype(dtype, copy=False))
        return self.enc_map(x_osm, batch.instance_maps), self.enc_opt(x_opt, batch.object_maps)

    def cross_stage(self, i: int, f_map: Tensor, f_opt: Tensor, batch: Batch) -> tuple[Tensor, Tensor]:
        """Refined (map, optical) features of stage ``i``, residual on each branch."""
        r_map, r_opt = self.cross[i](f_map, batch.instance_maps[i], f_opt, batch.object_maps[i])
        return ops.add(f_map, r_map), ops.add(f_opt, r_opt)

    def decode(self, pyr_map, pyr_opt, batch: Batch):
        refined = [self.cross_stage(i, pyr_map[i], pyr_opt[i], batch) for i in range(4)]
        x = None
        for i in (3, 2, 1, 0):
            rm, ro = refined[i]
            # GELU after the point-wise fuse: without it the decoder is linear in
            # the concatenated branches and cannot compare them pixel by pixel
            fused = ops.gelu(self.fuse[i](ops.concat([rm, ro], axis=1)))
            x = fused if x is None else self.fusion_blocks[i](x, fused)
        logits = ops.bilinear_upsample(self.classifier(x), self.cfg.strides[0])
        return logits, refined

    def forward_bcd(self, batch: Batch) -> Tensor:
        logits, _ = self.decode(*self.encode(batch), batch)
        return logits

    def forward_scd(self, batch: Batch) -> tuple[Tensor, Tensor, Tensor]:
        if self.cfg.task != "scd":
            raise ConfigurationError("model was built for BCD; semantic decoders are absent")
        logits, refined = self.decode(*self.encode(batch), batch)
        up = self.cfg.strides[0]
        lcm_osm = ops.bilinear_upsample(self.sem_map([r[0] for r in refined]), up)
        lcm_opt = ops.bilinear_upsample(self.sem_opt([r[1] for r in refined]), up)
        return logits, lcm_osm, lcm_opt

    def __call__(self, batch: Batch):
        return self.forward_scd(batch) if self.cfg.task == "scd" else self.forward_bcd(batch)
