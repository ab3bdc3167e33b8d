"""Evaluation metrics: PSNR, SSIM and MAE, over whole patches or cloud pixels only."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from cloudfuse.cloud_mask import CloudMask
from cloudfuse.errors import ShapeError, ValidationError
from cloudfuse.objective import LossConfig, ssim_map

# Reports store an infinite PSNR (identical images) as this string.
PSNR_INF = "+inf"


def _pair(gt, pred) -> tuple[np.ndarray, np.ndarray]:
    gt = np.asarray(gt.detach().cpu() if isinstance(gt, torch.Tensor) else gt, dtype=np.float64)
    pred = np.asarray(pred.detach().cpu() if isinstance(pred, torch.Tensor) else pred, dtype=np.float64)
    if gt.shape != pred.shape:
        raise ShapeError(f"ground truth {gt.shape} and prediction {pred.shape} differ")
    return gt, pred


def psnr_from_mse(mse: float, max_val: float = 1.0) -> float:
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(max_val**2 / mse)


def psnr(gt, pred, max_val: float = 1.0) -> float:
    """PSNR in dB over all bands and pixels; ``math.inf`` for identical inputs.

    Use ``max_val=255`` for 8-bit data and the default 1.0 for reflectance.
    """
    gt, pred = _pair(gt, pred)
    return psnr_from_mse(float(np.mean((pred - gt) ** 2)), max_val)


def mae(gt, pred) -> float:
    gt, pred = _pair(gt, pred)
    return float(np.mean(np.abs(pred - gt)))


def ssim_global(gt, pred, cfg: LossConfig = LossConfig()) -> float:
    """Mean of the loss's local SSIM map, so metric and objective agree."""
    gt, pred = _pair(gt, pred)
    return float(ssim_map(torch.from_numpy(pred), torch.from_numpy(gt), cfg).mean())


def masked_metrics(gt, pred, mask, max_val: float = 1.0) -> tuple[float, float]:
    """(PSNR, MAE) restricted to pixels where ``mask`` is 1, all bands included."""
    gt, pred = _pair(gt, pred)
    m = np.asarray(mask.values if isinstance(mask, CloudMask) else mask)
    if m.shape != gt.shape[-2:]:
        raise ShapeError(f"mask {m.shape} does not match image {gt.shape}")
    if not np.isin(m, (0, 1)).all():
        raise ValidationError("mask must be binary")
    sel = m.astype(bool)
    if not sel.any():
        raise ValidationError("mask selects no pixels")
    err = (pred - gt)[..., sel]
    return psnr_from_mse(float(np.mean(err**2)), max_val), float(np.mean(np.abs(err)))


def encode_psnr(value: float):
    return PSNR_INF if value == math.inf else value


def decode_psnr(value) -> float:
    return math.inf if value == PSNR_INF else float(value)


@dataclass
class PatchMetrics:
    id: str
    psnr_db: float
    ssim: float
    mae: float
    cloud_psnr_db: float | None = None
    cloud_mae: float | None = None
    cloud_fraction: float = 0.0

    def to_dict(self) -> dict:
        return {
            "psnr_db": encode_psnr(self.psnr_db),
            "ssim": self.ssim,
            "mae": self.mae,
            "cloud_psnr_db": None if self.cloud_psnr_db is None else encode_psnr(self.cloud_psnr_db),
            "cloud_mae": self.cloud_mae,
            "cloud_fraction": self.cloud_fraction,
        }


@dataclass
class MetricsReport:
    psnr_db: float
    ssim: float
    mae: float
    cloud_psnr_db: float | None
    cloud_mae: float | None
    n_patches: int
    per_patch: list[PatchMetrics] = field(default_factory=list)

    @classmethod
    def aggregate(cls, rows: list[PatchMetrics]) -> "MetricsReport":
        if not rows:
            raise ValidationError("cannot aggregate an empty set of patches")

        def mean(values):
            values = [v for v in values if v is not None]
            return float(np.mean(values)) if values else None

        return cls(
            psnr_db=mean(r.psnr_db for r in rows),
            ssim=mean(r.ssim for r in rows),
            mae=mean(r.mae for r in rows),
            cloud_psnr_db=mean(r.cloud_psnr_db for r in rows),
            cloud_mae=mean(r.cloud_mae for r in rows),
            n_patches=len(rows),
            per_patch=list(rows),
        )

    def to_dict(self) -> dict:
        return {
            "aggregate": {
                "psnr_db": encode_psnr(self.psnr_db),
                "ssim": self.ssim,
                "mae": self.mae,
                "cloud_psnr_db": None if self.cloud_psnr_db is None else encode_psnr(self.cloud_psnr_db),
                "cloud_mae": self.cloud_mae,
                "n_patches": self.n_patches,
            },
            "per_patch": {r.id: r.to_dict() for r in self.per_patch},
        }


def patch_metrics(patch_id: str, gt, pred, mask=None, max_val: float = 1.0) -> PatchMetrics:
    row = PatchMetrics(patch_id, psnr(gt, pred, max_val), ssim_global(gt, pred), mae(gt, pred))
    if mask is not None:
        m = np.asarray(mask.values if isinstance(mask, CloudMask) else mask)
        row.cloud_fraction = float(m.mean())
        if m.any():
            row.cloud_psnr_db, row.cloud_mae = masked_metrics(gt, pred, m, max_val)
    return row
