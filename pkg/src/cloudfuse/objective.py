"""Per-pixel MSE and SSIM maps and the cloud-weighted reconstruction loss."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
import torch.nn.functional as F

from cloudfuse.cloud_mask import WeightMap
from cloudfuse.errors import ShapeError, ValidationError


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 0.5
    lambda2: float = 0.5
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0 or (self.lambda1 == 0 and self.lambda2 == 0):
            raise ValidationError("lambda1 and lambda2 must be non-negative and not both zero")
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise ValidationError("ssim_window must be a positive odd integer")

    @property
    def c1(self) -> float:
        return (0.01 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (0.03 * self.dynamic_range) ** 2


def _batched(x: torch.Tensor) -> torch.Tensor:
    return x.unsqueeze(0) if x.dim() == 3 else x


def _pair(pred, gt) -> tuple[torch.Tensor, torch.Tensor]:
    pred, gt = torch.as_tensor(pred), torch.as_tensor(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} and target {tuple(gt.shape)} differ")
    if pred.dim() not in (3, 4):
        raise ShapeError(f"expected (C, H, W) or (B, C, H, W), got {tuple(pred.shape)}")
    return _batched(pred), _batched(gt).to(pred.dtype)


def mse_map(pred, gt) -> torch.Tensor:
    """Squared error averaged over bands: (B, H, W)."""
    pred, gt = _pair(pred, gt)
    return (pred - gt).pow(2).mean(dim=1)


@lru_cache(maxsize=8)
def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


@lru_cache(maxsize=32)
def _symmetric_index(n: int, pad: int) -> torch.Tensor:
    # numpy "symmetric" mode mirrors including the edge sample
    return torch.from_numpy(np.pad(np.arange(n), pad, mode="symmetric"))


def _blur(x: torch.Tensor, kernel: np.ndarray) -> torch.Tensor:
    """Separable Gaussian filter with symmetric padding; (B, C, H, W) in and out."""
    pad = len(kernel) // 2
    b, c, h, w = x.shape
    x = x.index_select(2, _symmetric_index(h, pad)).index_select(3, _symmetric_index(w, pad))
    k = torch.as_tensor(kernel, dtype=x.dtype)
    x = x.reshape(b * c, 1, h + 2 * pad, w + 2 * pad)
    x = F.conv2d(x, k.view(1, 1, -1, 1))
    x = F.conv2d(x, k.view(1, 1, 1, -1))
    return x.reshape(b, c, h, w)


def ssim_map(pred, gt, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Local SSIM per pixel, averaged over bands: (B, H, W)."""
    x, y = _pair(pred, gt)
    kernel = gaussian_kernel(cfg.ssim_window, cfg.ssim_sigma)
    mu_x, mu_y = _blur(x, kernel), _blur(y, kernel)
    var_x = _blur(x * x, kernel) - mu_x * mu_x
    var_y = _blur(y * y, kernel) - mu_y * mu_y
    cov = _blur(x * y, kernel) - mu_x * mu_y
    num = (2 * mu_x * mu_y + cfg.c1) * (2 * cov + cfg.c2)
    den = (mu_x * mu_x + mu_y * mu_y + cfg.c1) * (var_x + var_y + cfg.c2)
    return (num / den).mean(dim=1)


def cloud_aware_loss(pred, gt, weights, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Mean over pixels of ``W * (lambda1 * MSE + lambda2 * (1 - SSIM))``.

    ``weights`` is an (H, W) or (B, H, W) map, e.g. a cloud weight map's values.
    """
    pred_b, gt_b = _pair(pred, gt)
    if isinstance(weights, WeightMap):
        weights = weights.values
    w = torch.as_tensor(weights, dtype=pred_b.dtype)
    if w.dim() == 2:
        w = w.unsqueeze(0)
    if w.shape[-2:] != pred_b.shape[-2:] or w.shape[0] not in (1, pred_b.shape[0]):
        raise ShapeError(f"weight map {tuple(w.shape)} does not match prediction {tuple(pred_b.shape)}")
    if not torch.any(w != 0):
        warnings.warn("weight map is identically zero; the loss is degenerate", RuntimeWarning, stacklevel=2)
    per_pixel = cfg.lambda1 * mse_map(pred_b, gt_b)
    if cfg.lambda2:
        per_pixel = per_pixel + cfg.lambda2 * (1.0 - ssim_map(pred_b, gt_b, cfg))
    return (w * per_pixel).mean()
