"""Parameter and multiply-accumulate accounting.

MACs count the multiply-accumulates of convolutions and matrix products,
which are the same kernels instrumented by
:func:`objformer.autograd.count_macs`; normalisation, activations,
softmax and resampling are not counted. Counts are per sample; a batch of
``B`` costs ``B`` times as much.
"""

from __future__ import annotations

from typing import Optional, Sequence

from ..attention import attention_mac_terms, count_attention_macs, cross_attention_macs
from ..autograd.ops import ConfigurationError
from .config import ModelConfig
from .model import ObjFormer

SR_RATIOS = (8, 4, 2, 1)


def param_count(model: ObjFormer) -> int:
    return model.param_count()


def _tokens(n: Optional[int], h: int, w: int) -> int:
    return min(int(n), h * w) if n is not None else h * w


def _per_stage(x, default=None) -> list:
    if x is None or isinstance(x, (int, float)):
        return [x if x is not None else default] * 4
    if len(x) != 4:
        raise ConfigurationError("per-stage token counts need four entries")
    return list(x)


def _encoder_macs(model: ObjFormer, branch: str, h: int, w: int, tokens: Sequence, mode: str,
                  reduction: Sequence[int]) -> tuple[int, int]:
    enc = model.enc_map if branch == "map" else model.enc_opt
    total = attn_scores = 0
    ch, cw = h, w
    for i, stage in enumerate(enc.stages):
        s = stage.embed.stride
        ch, cw = ch // s, cw // s
        total += stage.embed.proj.macs(ch, cw)
        c = stage.embed.proj.cout
        n = _tokens(tokens[i], ch, cw)
        for blk in stage.blocks:
            if mode == "object_guided":
                terms = attention_mac_terms(mode, ch, cw, c, blk.attn.heads, n_tokens=n)
            else:
                terms = attention_mac_terms(mode, ch, cw, c, blk.attn.heads, reduction=reduction[i])
            total += sum(terms.values()) + blk.ffn.macs(ch, cw)
            if i == 0:
                attn_scores += terms["scores"]
    return total, attn_scores


def model_macs(model: ObjFormer, h: int, w: int, n_obj=None, n_ins=None, mode: str = "object_guided",
               reduction: Sequence[int] = SR_RATIOS, detail: bool = False):
    """Analytic per-sample MACs of a forward pass at ``h x w``.

    ``n_obj``/``n_ins`` are the object/instance token counts at each stage
    (an int applies to all stages; each is capped at the stage's pixel
    count; ``None`` means one token per pixel). ``mode`` swaps the attention
    layers for the vanilla or spatial-reduction counterparts for
    comparison; the rest of the network is unchanged.
    """
    cfg = model.cfg
    if h % cfg.total_stride or w % cfg.total_stride:
        raise ConfigurationError(f"input {h}x{w} not divisible by {cfg.total_stride}")
    obj = _per_stage(n_obj)
    ins = _per_stage(n_ins)
    enc_map, sc_map = _encoder_macs(model, "map", h, w, ins, mode, reduction)
    enc_opt, sc_opt = _encoder_macs(model, "opt", h, w, obj, mode, reduction)
    dec = 0
    for i, s in enumerate(cfg.stage_strides()):
        ch, cw = h // s, w // s
        hw = ch * cw
        cm, co = cfg.map_channels[i], cfg.opt_channels[i]
        if mode == "object_guided":
            nq, nk = _tokens(ins[i], ch, cw), _tokens(obj[i], ch, cw)
            dec += cross_attention_macs(nq, nk, cm, co, cm)
        elif mode == "vanilla":
            dec += cross_attention_macs(hw, hw, cm, co, cm)
        elif mode == "spatial_reduction":
            r = reduction[i]
            m = (ch // r) * (cw // r)
            dec += cross_attention_macs(hw, m, cm, co, cm) + (m * co * co * r * r if r > 1 else 0)
        else:
            raise ConfigurationError(f"unknown mode {mode!r}")
        dec += model.fuse[i].macs(ch, cw)
        if i < 3:
            fb = model.fusion_blocks[i]
            dec += fb.conv.macs(ch, cw) + (fb.proj.macs(ch, cw) if fb.proj is not None else 0)
    s1 = cfg.stage_strides()[0]
    dec += model.classifier.macs(h // s1, w // s1)
    sem = 0
    if cfg.task == "scd":
        for decoder in (model.sem_map, model.sem_opt):
            for i, s in enumerate(cfg.stage_strides()):
                fb = decoder.blocks[i]
                sem += fb.conv.macs(h // s, w // s) + (fb.proj.macs(h // s, w // s) if fb.proj is not None else 0)
            sem += decoder.classifier.macs(h // s1, w // s1)
    total = enc_map + enc_opt + dec + sem
    if detail:
        return {
            "encoder_map": enc_map,
            "encoder_opt": enc_opt,
            "decoder": dec,
            "semantic_decoders": sem,
            "stage1_attention_scores": sc_map + sc_opt,
            "total": total,
        }
    return total


def reduction_params(cfg: ModelConfig, reduction: Sequence[int] = SR_RATIOS) -> int:
    """Extra parameters a spatial-reduction variant needs (R x R conv + LN per block)."""
    extra = 0
    for chans, depths in ((cfg.map_channels, cfg.map_blocks), (cfg.opt_channels, cfg.opt_blocks)):
        for c, dpt, r in zip(chans, depths, reduction):
            if r > 1:
                extra += dpt * (c * c * r * r + c + 2 * c)
    return extra


def complexity_table(model: ObjFormer, h: int, w: int, n_obj=None, n_ins=None,
                     reduction: Sequence[int] = SR_RATIOS) -> list[dict]:
    """Params/MACs of the network under the three attention variants."""
    params = param_count(model)
    rows = []
    for mode in ("vanilla", "spatial_reduction", "object_guided"):
        d = model_macs(model, h, w, n_obj, n_ins, mode=mode, reduction=reduction, detail=True)
        p = params + (reduction_params(model.cfg, reduction) if mode == "spatial_reduction" else 0)
        rows.append({"mode": mode, "params": p, "macs": d["total"],
                     "stage1_attention_scores": d["stage1_attention_scores"]})
    return rows


__all__ = [
    "complexity_table",
    "count_attention_macs",
    "model_macs",
    "param_count",
    "reduction_params",
]
