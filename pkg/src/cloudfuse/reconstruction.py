"""Global feature fusion, image reconstruction and the residual prediction."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn

from cloudfuse.blocks import ChannelLayerNorm, WindowAttention, check_channels, conv, reformat_inv
from cloudfuse.errors import ShapeError
from cloudfuse.fusion_net import OPTICAL_BANDS, FusionConfig, FusionNet


class GlobalFeatureFusion(nn.Module):
    """Concat(D stage outputs) -> 1x1 -> 3x3, plus a skip from the encoded optical input."""

    def __init__(self, channels: int, depth: int):
        super().__init__()
        self.channels = channels
        self.depth = depth
        self.conv1x1 = conv(depth * channels, channels, 1)
        self.conv3x3 = conv(channels, channels, 3)

    def forward(self, features: list[torch.Tensor], f_opt0: torch.Tensor) -> torch.Tensor:
        if len(features) != self.depth:
            raise ShapeError(f"expected {self.depth} stage outputs, got {len(features)}")
        shapes = {tuple(f.shape) for f in features} | {tuple(f_opt0.shape)}
        if len(shapes) != 1:
            raise ShapeError(f"stage outputs and skip features disagree: {sorted(shapes)}")
        check_channels(f_opt0, self.channels, "gff skip")
        return self.conv3x3(self.conv1x1(torch.cat(features, dim=1))) + f_opt0


class ImageReconstruction(nn.Module):
    """3x3 conv to 13*s^2 channels, depth-to-space, 3x3 conv on 13 bands."""

    def __init__(self, channels: int, s: int):
        super().__init__()
        self.channels = channels
        self.s = s
        self.pre = conv(channels, OPTICAL_BANDS * s * s, 3)
        self.post = conv(OPTICAL_BANDS, OPTICAL_BANDS, 3)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        check_channels(x, self.channels, "irn")
        return self.post(reformat_inv(self.pre(x), self.s))


def predict(f_irn: torch.Tensor, input_opt: torch.Tensor) -> torch.Tensor:
    """Residual prediction; unclipped so saturated pixels keep their gradient."""
    if f_irn.shape != input_opt.shape:
        raise ShapeError(f"reconstruction {tuple(f_irn.shape)} and input {tuple(input_opt.shape)} differ")
    return f_irn + input_opt


def export(prediction) -> np.ndarray:
    """Clip a prediction to valid reflectance for writing to disk."""
    if isinstance(prediction, torch.Tensor):
        prediction = prediction.detach().cpu().numpy()
    return np.clip(prediction, 0.0, 1.0).astype(np.float32)


class CloudRemovalNet(nn.Module):
    def __init__(self, cfg: FusionConfig):
        super().__init__()
        self.cfg = cfg
        self.fusion = FusionNet(cfg)
        self.gff = GlobalFeatureFusion(cfg.channels, cfg.N)
        self.irn = ImageReconstruction(cfg.channels, cfg.s)

    def forward(self, opt: torch.Tensor, sar: torch.Tensor) -> torch.Tensor:
        features, f_opt0 = self.fusion(opt, sar)
        return predict(self.irn(self.gff(features, f_opt0)), opt)

    def final_layer(self) -> nn.Conv2d:
        return self.irn.post


def initialize(model: nn.Module, seed: int, zero_final: bool = True) -> nn.Module:
    """Deterministic fan-in scaled uniform init drawn from ``seed``.

    Convolution and linear weights get U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
    biases zero, layer norms identity, attention position biases
    U(-0.02, 0.02). With ``zero_final`` the last convolution of the network
    starts at zero so the untrained model returns its cloudy input.
    """
    gen = torch.Generator().manual_seed(seed)

    def uniform_(p: torch.Tensor, bound: float) -> None:
        p.copy_((torch.rand(p.shape, generator=gen, dtype=p.dtype) * 2 - 1) * bound)

    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, (nn.Conv2d, nn.Linear)):
                uniform_(module.weight, 1.0 / math.sqrt(module.weight[0].numel()))
                module.bias.zero_()
            elif isinstance(module, ChannelLayerNorm):
                module.weight.fill_(1.0)
                module.bias.zero_()
            elif isinstance(module, WindowAttention):
                uniform_(module.relative_bias, 0.02)
        if zero_final and isinstance(model, CloudRemovalNet):
            model.final_layer().weight.zero_()
            model.final_layer().bias.zero_()
    return model


def build_model(cfg: FusionConfig, seed: int = 0, dtype=torch.float32, zero_final: bool = True) -> CloudRemovalNet:
    model = CloudRemovalNet(cfg).to(dtype)
    return initialize(model, seed, zero_final)
