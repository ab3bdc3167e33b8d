"""PNG panels of (cloudy | SAR | prediction | ground truth) for quick inspection."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from cloudfuse.cloud_mask import BAND_INDEX

RGB = (BAND_INDEX["B4"], BAND_INDEX["B3"], BAND_INDEX["B2"])
RGB_GAIN = 3.5  # reflectance around 0.1-0.3 otherwise renders nearly black
GAP = 4


def rgb_panel(bands: np.ndarray) -> np.ndarray:
    rgb = np.stack([bands[i] for i in RGB], axis=-1) * RGB_GAIN
    return (np.clip(rgb, 0.0, 1.0) * 255).round().astype(np.uint8)


def sar_panel(channels: np.ndarray) -> np.ndarray:
    vv = (np.clip(channels[0], 0.0, 1.0) * 255).round().astype(np.uint8)
    return np.repeat(vv[..., None], 3, axis=-1)


def write_grid(path, cloudy, sar, prediction, truth=None) -> Path:
    panels = [rgb_panel(cloudy), sar_panel(sar), rgb_panel(prediction)]
    if truth is not None:
        panels.append(rgb_panel(truth))
    h, w, _ = panels[0].shape
    canvas = np.full((h, len(panels) * (w + GAP) - GAP, 3), 255, dtype=np.uint8)
    for k, panel in enumerate(panels):
        canvas[:, k * (w + GAP) : k * (w + GAP) + w] = panel
    path = Path(path)
    Image.fromarray(canvas).save(path)
    return path
