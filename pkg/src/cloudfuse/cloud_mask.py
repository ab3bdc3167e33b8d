"""Cloud probability score, binary cloud mask, snow rejection and loss weights.

All maps are computed in float64 from a (13, H, W) reflectance cube in the
Sentinel-2 band order ``B1 .. B8, B8A, B9 .. B12``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cloudfuse.errors import ShapeError, ValidationError

BAND_NAMES = ("B1", "B2", "B3", "B4", "B5", "B6", "B7", "B8", "B8A", "B9", "B10", "B11", "B12")
BAND_INDEX = {name: i for i, name in enumerate(BAND_NAMES)}

CLOUD_THRESHOLD = 0.2
NDSI_SNOW_CUTOFF = 0.6
DEFAULT_ALPHA = 0.8

# (band sum, clear level, cloud level); each ratio is (sum - clear) / (cloud - clear).
SCORE_RATIOS = (
    (("B2",), 0.1, 0.5),
    (("B1",), 0.1, 0.3),
    (("B10", "B1"), 0.15, 0.2),
    (("B4", "B3", "B2"), 0.2, 0.8),
)


@dataclass(frozen=True)
class CloudMask:
    values: np.ndarray  # (H, W) uint8 in {0, 1}
    refined: bool = False

    @property
    def fraction(self) -> float:
        return float(self.values.mean())


@dataclass(frozen=True)
class WeightMap:
    values: np.ndarray  # (H, W) float64 in {alpha, 1 - alpha}
    alpha: float


def _bands(opt) -> np.ndarray:
    cube = np.asarray(getattr(opt, "bands", opt), dtype=np.float64)
    if cube.ndim != 3 or cube.shape[0] != len(BAND_NAMES):
        raise ShapeError(f"expected (13, H, W) optical cube, got {cube.shape}")
    if not np.all(np.isfinite(cube)):
        raise ValidationError("optical cube contains non-finite values")
    if cube.min() < 0.0 or cube.max() > 1.0:
        raise ValidationError(
            f"optical cube is not normalized reflectance: range [{cube.min():.4g}, {cube.max():.4g}]"
        )
    return cube


def cloud_score(opt) -> np.ndarray:
    """Per-pixel cloud probability in [0, 1].

    Each of the four brightness ratios is clamped to [0, 1] before taking the
    minimum, so a pixel only scores high when every test agrees.
    """
    cube = _bands(opt)
    score = None
    for names, clear, cloud in SCORE_RATIOS:
        total = cube[BAND_INDEX[names[0]]]
        for name in names[1:]:
            total = total + cube[BAND_INDEX[name]]
        ratio = np.clip((total - clear) / (cloud - clear), 0.0, 1.0)
        score = ratio if score is None else np.minimum(score, ratio)
    return score


def binarize(score: np.ndarray, threshold: float = CLOUD_THRESHOLD) -> CloudMask:
    if not 0.0 <= threshold <= 1.0:
        raise ValidationError(f"threshold must lie in [0, 1], got {threshold}")
    score = np.asarray(score, dtype=np.float64)
    if score.ndim != 2:
        raise ShapeError(f"expected (H, W) score map, got {score.shape}")
    if not np.all(np.isfinite(score)) or score.min() < 0.0 or score.max() > 1.0:
        raise ValidationError("score map must be finite and within [0, 1]")
    return CloudMask((score > threshold).astype(np.uint8), refined=False)


def ndsi(opt) -> np.ndarray:
    """Normalized difference snow index (B3 - B11) / (B3 + B11); 0 where both are 0."""
    cube = _bands(opt)
    green = cube[BAND_INDEX["B3"]]
    swir = cube[BAND_INDEX["B11"]]
    total = green + swir
    out = np.zeros_like(total)
    np.divide(green - swir, total, out=out, where=total != 0)
    return out


def refine_mask(m: CloudMask, snow_index: np.ndarray) -> CloudMask:
    """Drop mask pixels whose snow index exceeds the cutoff (snow, not cloud)."""
    values = np.asarray(m.values)
    snow_index = np.asarray(snow_index, dtype=np.float64)
    if values.shape != snow_index.shape:
        raise ShapeError(f"mask {values.shape} and NDSI {snow_index.shape} differ")
    if not np.isin(values, (0, 1)).all():
        raise ValidationError("mask must be binary")
    keep = (snow_index <= NDSI_SNOW_CUTOFF).astype(np.uint8)
    return CloudMask(values.astype(np.uint8) * keep, refined=True)


def weight_map(m_refined: CloudMask, alpha: float = DEFAULT_ALPHA) -> WeightMap:
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha must lie in [0, 1], got {alpha}")
    mask = np.asarray(m_refined.values, dtype=np.float64)
    if not np.isin(mask, (0.0, 1.0)).all():
        raise ValidationError("mask must be binary")
    return WeightMap(alpha * mask + (1.0 - alpha) * (1.0 - mask), alpha)


def refined_mask(opt, threshold: float = CLOUD_THRESHOLD) -> CloudMask:
    """Score, threshold and snow-reject in one call."""
    return refine_mask(binarize(cloud_score(opt), threshold), ndsi(opt))


def mask_fraction(m: CloudMask | np.ndarray) -> float:
    return float(np.asarray(getattr(m, "values", m), dtype=np.float64).mean())
