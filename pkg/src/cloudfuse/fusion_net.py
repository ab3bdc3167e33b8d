"""Attention-driven SAR/optical feature fusion.

Each modality is space-to-depth reformatted and encoded separately. A stage
runs, per modality, J residual dense blocks with a window-attention block
after each of the first J-1, concatenates the attention outputs with the last
RDB output and compresses them with a 1x1 convolution. The optical and SAR
results are then merged into the stage's fused optical features. Stages are
chained N times.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from cloudfuse.blocks import ChannelLayerNorm, MlpGelu, WindowAttention, check_channels, conv, reformat
from cloudfuse.errors import ShapeError, ValidationError

OPTICAL_BANDS = 13
SAR_CHANNELS = 2
MODALITIES = ("opt", "sar")


@dataclass(frozen=True)
class FusionConfig:
    s: int = 2
    channels: int = 64
    J: int = 4
    N: int = 3
    rdb_layers: int = 5
    rdb_growth: int = 32
    window: int = 8
    heads: int = 4
    mlp_ratio: float = 2.0

    def __post_init__(self):
        if self.J < 2:
            raise ValidationError(f"J must be >= 2, got {self.J}")
        if self.N < 1:
            raise ValidationError(f"N must be >= 1, got {self.N}")
        if self.s < 1 or self.window < 1 or self.rdb_layers < 1 or self.rdb_growth < 1:
            raise ValidationError("s, window, rdb_layers and rdb_growth must be positive")
        if self.channels % self.heads:
            raise ValidationError(f"channels {self.channels} not divisible by heads {self.heads}")

    @property
    def multiple(self) -> int:
        """Input sizes must be divisible by this."""
        return self.s * self.window

    def check_size(self, h: int, w: int) -> None:
        if h % self.multiple or w % self.multiple:
            raise ShapeError(f"input {h}x{w} must be divisible by s*window = {self.multiple}")

    def to_dict(self) -> dict:
        return asdict(self)


MICRO = FusionConfig(s=2, channels=8, J=2, N=1, rdb_layers=2, rdb_growth=16, window=4, heads=2, mlp_ratio=2.0)


class LowLevelEncoder(nn.Module):
    """Two 3x3 convolutions, each followed by ReLU."""

    def __init__(self, in_channels: int, channels: int):
        super().__init__()
        self.in_channels = in_channels
        self.conv1 = conv(in_channels, channels, 3)
        self.conv2 = conv(channels, channels, 3)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        check_channels(x, self.in_channels, "lfe")
        return F.relu(self.conv2(F.relu(self.conv1(x))))


class ResidualDenseBlock(nn.Module):
    def __init__(self, channels: int, layers: int, growth: int):
        super().__init__()
        self.channels = channels
        self.dense = nn.ModuleList(conv(channels + i * growth, growth, 3) for i in range(layers))
        self.fuse = conv(channels + layers * growth, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        check_channels(x, self.channels, "rdb")
        feats = x
        for layer in self.dense:
            feats = torch.cat([feats, F.relu(layer(feats))], dim=1)
        return x + self.fuse(feats)


class SwinBlock(nn.Module):
    """``x + MLP(LN(x + W-MSA(LN(x))))`` with non-shifted windows."""

    def __init__(self, channels: int, window: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = ChannelLayerNorm(channels)
        self.attn = WindowAttention(channels, window, heads)
        self.norm2 = ChannelLayerNorm(channels)
        self.mlp = MlpGelu(channels, mlp_ratio)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.mlp(self.norm2(x + self.attn(self.norm1(x))))


class ModalityBranch(nn.Module):
    """RDB, Swin, RDB, Swin, ..., RDB followed by 1x1 aggregation."""

    def __init__(self, cfg: FusionConfig):
        super().__init__()
        c = cfg.channels
        self.rdbs = nn.ModuleList(ResidualDenseBlock(c, cfg.rdb_layers, cfg.rdb_growth) for _ in range(cfg.J))
        self.swins = nn.ModuleList(SwinBlock(c, cfg.window, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.J - 1))
        self.aggregate = conv(cfg.J * c, c, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        kept = []
        for rdb, swin in zip(self.rdbs, self.swins):
            x = swin(rdb(x))
            kept.append(x)
        kept.append(self.rdbs[-1](x))
        return self.aggregate(torch.cat(kept, dim=1))


class FusionStage(nn.Module):
    def __init__(self, cfg: FusionConfig):
        super().__init__()
        self.channels = cfg.channels
        self.opt = ModalityBranch(cfg)
        self.sar = ModalityBranch(cfg)
        self.merge = conv(2 * cfg.channels, cfg.channels, 1)

    def branches(self, f_opt: torch.Tensor, f_sar: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        check_channels(f_opt, self.channels, "stage optical input")
        check_channels(f_sar, self.channels, "stage SAR input")
        if f_opt.shape != f_sar.shape:
            raise ShapeError(f"optical {tuple(f_opt.shape)} and SAR {tuple(f_sar.shape)} features differ")
        return self.opt(f_opt), self.sar(f_sar)

    def cross_modal_merge(self, opt_final: torch.Tensor, sar_final: torch.Tensor) -> torch.Tensor:
        """1x1 conv over the concatenated modalities plus an optical residual."""
        check_channels(opt_final, self.channels, "merge optical input")
        check_channels(sar_final, self.channels, "merge SAR input")
        return opt_final + self.merge(torch.cat([opt_final, sar_final], dim=1))

    def forward(self, f_opt: torch.Tensor, f_sar: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        opt_final, sar_final = self.branches(f_opt, f_sar)
        return self.cross_modal_merge(opt_final, sar_final), sar_final


class FusionNet(nn.Module):
    def __init__(self, cfg: FusionConfig):
        super().__init__()
        self.cfg = cfg
        s2 = cfg.s * cfg.s
        self.lfe = nn.ModuleDict(
            {"opt": LowLevelEncoder(OPTICAL_BANDS * s2, cfg.channels), "sar": LowLevelEncoder(SAR_CHANNELS * s2, cfg.channels)}
        )
        self.stages = nn.ModuleList(FusionStage(cfg) for _ in range(cfg.N))

    def forward(self, opt: torch.Tensor, sar: torch.Tensor) -> tuple[list[torch.Tensor], torch.Tensor]:
        """Return the N fused optical feature maps and the encoded optical input."""
        if opt.dim() != 4 or opt.shape[1] != OPTICAL_BANDS:
            raise ShapeError(f"optical input must be (B, 13, H, W), got {tuple(opt.shape)}")
        if sar.dim() != 4 or sar.shape[1] != SAR_CHANNELS or sar.shape[-2:] != opt.shape[-2:]:
            raise ShapeError(f"SAR input {tuple(sar.shape)} does not match optical {tuple(opt.shape)}")
        self.cfg.check_size(*opt.shape[-2:])
        f_opt0 = self.lfe["opt"](reformat(opt, self.cfg.s))
        f_sar = self.lfe["sar"](reformat(sar, self.cfg.s))
        fused, f_opt = [], f_opt0
        for stage in self.stages:
            f_opt, f_sar = stage(f_opt, f_sar)
            fused.append(f_opt)
        return fused, f_opt0
