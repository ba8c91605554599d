from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

from ..attention import FUSIONS
from ..autograd.ops import ConfigurationError


@dataclass(frozen=True)
class ModelConfig:
    """Stage/channel/head configuration of the two-branch network.

    Stage lists run from the finest (stage 1) to the coarsest (stage 4).
    ``decoder_heads`` is listed in decoder order, i.e. coarsest first, so
    the decoder stage working on encoder stage ``i`` uses
    ``decoder_heads[3 - i]``.
    """

    map_blocks: tuple[int, ...] = (2, 2, 2, 2)
    opt_blocks: tuple[int, ...] = (3, 4, 6, 3)
    map_channels: tuple[int, ...] = (32, 64, 160, 256)
    opt_channels: tuple[int, ...] = (64, 128, 320, 512)
    patch_downsample: tuple[float, ...] = (0.25, 0.5, 0.5, 0.5)
    encoder_heads: tuple[int, ...] = (1, 2, 5, 8)
    decoder_heads: tuple[int, ...] = (8, 5, 2, 1)
    mlp_ratio: int = 4
    n_classes_lcm: int = 7
    decoder_dim: int = 128
    semantic_dim: int = 128
    fusion: str = "mean"
    task: str = "bcd"
    preset: str = "paper"

    @property
    def strides(self) -> tuple[int, ...]:
        return tuple(int(round(1.0 / f)) for f in self.patch_downsample)

    @property
    def total_stride(self) -> int:
        s = 1
        for x in self.strides:
            s *= x
        return s

    def stage_strides(self) -> tuple[int, ...]:
        """Cumulative downsampling factor of each stage (4, 8, 16, 32)."""
        out, s = [], 1
        for x in self.strides:
            s *= x
            out.append(s)
        return tuple(out)

    def validate(self) -> "ModelConfig":
        lists = (self.map_blocks, self.opt_blocks, self.map_channels, self.opt_channels,
                 self.patch_downsample, self.encoder_heads, self.decoder_heads)
        if any(len(x) != 4 for x in lists):
            raise ConfigurationError("every stage list must have four entries")
        for i in range(4):
            eh = self.encoder_heads[i]
            dh = self.decoder_heads[3 - i]
            if self.map_channels[i] % eh or self.opt_channels[i] % eh:
                raise ConfigurationError(f"stage {i + 1}: channels not divisible by {eh} encoder heads")
            if self.map_channels[i] % dh:
                raise ConfigurationError(f"stage {i + 1}: cross-attention dim not divisible by {dh} heads")
        if self.fusion not in FUSIONS:
            raise ConfigurationError(f"fusion must be one of {FUSIONS}")
        if self.task not in ("bcd", "scd"):
            raise ConfigurationError("task must be 'bcd' or 'scd'")
        if self.mlp_ratio < 1 or self.n_classes_lcm < 2:
            raise ConfigurationError("mlp_ratio >= 1 and n_classes_lcm >= 2 required")
        return self

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "ModelConfig":
        if name == "paper":
            cfg = cls()
        elif name == "tiny":
            cfg = cls(
                map_blocks=(1, 1, 1, 1),
                opt_blocks=(1, 1, 2, 1),
                map_channels=(8, 16, 24, 32),
                opt_channels=(16, 32, 48, 64),
                encoder_heads=(1, 2, 4, 8),
                decoder_heads=(8, 4, 2, 1),
                decoder_dim=32,
                semantic_dim=32,
                preset="tiny",
            )
        else:
            raise ConfigurationError(f"unknown preset {name!r}")
        return replace(cfg, **overrides).validate() if overrides else cfg.validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k in names}
        return cls(**kw).validate()
