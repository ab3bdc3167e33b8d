"""Co-registered SAR/optical patches: binary file format, normalization, synthesis.

Patch file layout (little endian)::

    16 bytes   magic b"CLFUSEv1" padded with NUL
    u8         kind (0 optical, 1 sar, 2 mask, 3 weight)
    u16        C
    u32        H
    u32        W
    u8         normalized flag
    C*H*W      float32, row-major (C, H, W)
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, sobel

from cloudfuse.cloud_mask import BAND_INDEX, BAND_NAMES, refined_mask
from cloudfuse.errors import PatchCorruptionError, PatchFormatError, ShapeError, ValidationError

MAGIC = b"CLFUSEv1".ljust(16, b"\0")
HEADER = struct.Struct("<BHIIB")

KINDS = {"optical": 0, "sar": 1, "mask": 2, "weight": 3}
KIND_NAMES = {v: k for k, v in KINDS.items()}
KIND_CHANNELS = {"optical": 13, "sar": 2, "mask": 1, "weight": 1}

SAR_NAMES = ("VV", "VH")
REFLECTANCE_SCALE = 10000.0
SAR_DB_RANGE = {"VV": (-25.0, 0.0), "VH": (-32.5, 0.0)}

# Bands lifted by synthetic clouds; chosen so the cloud score fires on them.
CLOUD_BANDS = ("B1", "B2", "B3", "B4", "B10")
TEXTURE_SIGMA = 1.0
TEXTURE_GAIN = 0.2

# Top-of-atmosphere reflectance, B1 .. B12 (incl. B8A), of the synthetic surface materials.
ENDMEMBERS = {
    "vegetation": (0.06, 0.05, 0.07, 0.04, 0.10, 0.25, 0.30, 0.32, 0.33, 0.10, 0.01, 0.22, 0.10),
    "soil": (0.08, 0.08, 0.11, 0.14, 0.17, 0.20, 0.22, 0.24, 0.26, 0.08, 0.01, 0.32, 0.25),
    "built": (0.10, 0.10, 0.12, 0.13, 0.15, 0.17, 0.18, 0.20, 0.21, 0.07, 0.01, 0.25, 0.22),
}


@dataclass
class OpticalPatch:
    bands: np.ndarray  # (13, H, W)
    normalized: bool = True
    band_names: tuple = BAND_NAMES

    def __post_init__(self):
        _check_cube(self.bands, 13, self.normalized, "optical")

    @property
    def shape(self) -> tuple:
        return self.bands.shape


@dataclass
class SarPatch:
    channels: np.ndarray  # (2, H, W)
    normalized: bool = True
    channel_names: tuple = SAR_NAMES

    def __post_init__(self):
        _check_cube(self.channels, 2, self.normalized, "sar")

    @property
    def shape(self) -> tuple:
        return self.channels.shape


@dataclass
class PatchTriplet:
    cloudy: OpticalPatch
    clear: OpticalPatch
    sar: SarPatch
    id: str = field(default="")

    def __post_init__(self):
        hw = {self.cloudy.shape[1:], self.clear.shape[1:], self.sar.shape[1:]}
        if len(hw) != 1:
            raise ShapeError(f"triplet members disagree on spatial size: {sorted(hw)}")

    @property
    def size(self) -> tuple:
        return self.cloudy.shape[1:]


def _check_cube(data: np.ndarray, channels: int, normalized: bool, label: str) -> None:
    if data.ndim != 3 or data.shape[0] != channels:
        raise ShapeError(f"{label} patch must be ({channels}, H, W), got {data.shape}")
    if not np.all(np.isfinite(data)):
        raise ValidationError(f"{label} patch contains non-finite values")
    if normalized and (data.min() < 0.0 or data.max() > 1.0):
        raise ValidationError(f"normalized {label} patch has values outside [0, 1]")


def save_patch(path, data, kind: str | None = None, normalized: bool = True) -> Path:
    """Write a patch or a bare (C, H, W) / (H, W) array to ``path``."""
    if isinstance(data, OpticalPatch):
        kind, normalized, data = "optical", data.normalized, data.bands
    elif isinstance(data, SarPatch):
        kind, normalized, data = "sar", data.normalized, data.channels
    if kind not in KINDS:
        raise ValidationError(f"unknown patch kind {kind!r}")
    arr = np.asarray(data)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] != KIND_CHANNELS[kind]:
        raise ShapeError(f"{kind} patch must have {KIND_CHANNELS[kind]} channels, got {arr.shape}")
    c, h, w = arr.shape
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(HEADER.pack(KINDS[kind], c, h, w, int(bool(normalized))))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return path


def read_patch_array(path) -> tuple[str, np.ndarray, bool]:
    """Return ``(kind, float32 array, normalized)`` without kind-specific checks."""
    raw = Path(path).read_bytes()
    head = len(MAGIC) + HEADER.size
    if len(raw) < head or raw[: len(MAGIC)] != MAGIC:
        raise PatchFormatError(f"{path}: not a patch file (bad magic or short header)")
    kind_id, c, h, w, normalized = HEADER.unpack_from(raw, len(MAGIC))
    if kind_id not in KIND_NAMES or normalized not in (0, 1):
        raise PatchFormatError(f"{path}: invalid header fields kind={kind_id} normalized={normalized}")
    kind = KIND_NAMES[kind_id]
    if c != KIND_CHANNELS[kind]:
        raise PatchCorruptionError(f"{path}: {kind} patch declares C={c}, expected {KIND_CHANNELS[kind]}")
    payload = raw[head:]
    expected = 4 * c * h * w
    if len(payload) != expected:
        raise PatchCorruptionError(f"{path}: payload is {len(payload)} bytes, header implies {expected}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(c, h, w).astype(np.float32)
    return kind, arr, bool(normalized)


def load_patch(path, kind: str) -> OpticalPatch | SarPatch:
    found, arr, normalized = read_patch_array(path)
    if found != kind:
        raise PatchCorruptionError(f"{path}: expected a {kind} patch, file holds {found}")
    if kind == "optical":
        return OpticalPatch(arr, normalized)
    if kind == "sar":
        return SarPatch(arr, normalized)
    raise ValidationError(f"load_patch handles optical/sar only, got {kind!r}")


def normalize_optical(raw) -> OpticalPatch:
    """Digital numbers to [0, 1] top-of-atmosphere reflectance."""
    raw = np.asarray(raw)
    if raw.ndim != 3 or raw.shape[0] != 13:
        raise ShapeError(f"expected (13, H, W) digital numbers, got {raw.shape}")
    if not np.all(np.isfinite(raw)) or raw.min() < 0:
        raise ValidationError("digital numbers must be finite and non-negative")
    return OpticalPatch(np.clip(raw / REFLECTANCE_SCALE, 0.0, 1.0).astype(np.float32))


def normalize_sar(raw_db) -> SarPatch:
    """Clip VV/VH backscatter (dB) to fixed ranges and map affinely onto [0, 1]."""
    raw_db = np.asarray(raw_db, dtype=np.float64)
    if raw_db.ndim != 3 or raw_db.shape[0] != 2:
        raise ShapeError(f"expected (2, H, W) backscatter, got {raw_db.shape}")
    if not np.all(np.isfinite(raw_db)):
        raise ValidationError("backscatter contains non-finite values")
    out = np.empty_like(raw_db)
    for i, name in enumerate(SAR_NAMES):
        lo, hi = SAR_DB_RANGE[name]
        out[i] = (np.clip(raw_db[i], lo, hi) - lo) / (hi - lo)
    return SarPatch(out.astype(np.float32))


def _smooth_field(rng: np.random.Generator, h: int, w: int, sigma: float) -> np.ndarray:
    f = gaussian_filter(rng.standard_normal((h, w)), sigma, mode="wrap")
    f -= f.min()
    return f / max(f.max(), 1e-12)


CLOUD_BLOBS = (2, 6)
HAZE_FLOOR = 0.02


def _blob_field(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Sum of isotropic Gaussian blobs over a faint haze floor, peak 1."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    field = np.zeros((h, w))
    for _ in range(rng.integers(CLOUD_BLOBS[0], CLOUD_BLOBS[1] + 1)):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        sigma = rng.uniform(0.12, 0.3) * max(h, w)
        field += rng.uniform(0.5, 1.0) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    field /= field.max()
    return HAZE_FLOOR + (1 - HAZE_FLOOR) * field


def _apply_clouds(clear: np.ndarray, opacity: np.ndarray, lift: np.ndarray) -> np.ndarray:
    cloudy = clear.copy()
    for amount, name in zip(lift, CLOUD_BANDS):
        i = BAND_INDEX[name]
        cloudy[i] = np.clip(clear[i] + amount * opacity, 0.0, 1.0)
    return cloudy


def _calibrated_clouds(clear, blobs, lift, fraction, iters: int = 60) -> np.ndarray:
    """Scale blob opacity (capped at 1) so the refined mask covers ``fraction`` of pixels."""
    def cover(gain):
        cloudy = _apply_clouds(clear, np.minimum(gain * blobs, 1.0), lift).astype(np.float32)
        return cloudy, refined_mask(cloudy).fraction

    lo, hi = 0.0, 1.0 / HAZE_FLOOR
    best = cover(hi)[0]
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        cloudy, frac = cover(mid)
        if frac >= fraction:
            hi, best = mid, cloudy
        else:
            lo = mid
    return best



def make_synthetic_triplet(
    seed: int, H: int = 64, W: int = 64, cloud_fraction: float = 0.5, multiple: int = 16
) -> PatchTriplet:
    """Deterministic synthetic (cloudy, clear, sar) triplet.

    The clear scene mixes fixed material spectra (``ENDMEMBERS``) with smooth
    random abundances, then applies a fine multiplicative texture and sensor
    noise, so the bands untouched by clouds determine the lifted ones. Visible
    reflectance stays below 0.18 and the scene never scores as cloud.
    Clouds are additive Gaussian blobs on ``CLOUD_BANDS``; the blob opacity
    is scaled by bisection so the smallest cover reaching ``cloud_fraction``
    of the pixels under the refined cloud mask is used. Snow index stays
    below 0.6 under full opacity. SAR is an edge/intensity
    transform of the abundance fields plus noise.
    """
    if not 0.0 <= cloud_fraction <= 1.0:
        raise ValidationError(f"cloud_fraction must lie in [0, 1], got {cloud_fraction}")
    if H % multiple or W % multiple or H <= 0 or W <= 0:
        raise ShapeError(f"patch size {H}x{W} must be a positive multiple of {multiple}")
    rng = np.random.default_rng(seed)

    logits = np.stack([_smooth_field(rng, H, W, sigma=max(H, W) / 12) for _ in ENDMEMBERS]) * 6.0
    abundance = np.exp(logits - logits.max(axis=0))
    abundance /= abundance.sum(axis=0)
    spectra = np.array(list(ENDMEMBERS.values()))  # (materials, 13)
    clear = np.einsum("kb,khw->bhw", spectra, abundance)
    texture = _smooth_field(rng, H, W, sigma=TEXTURE_SIGMA)
    clear *= 1.0 + TEXTURE_GAIN * (texture - 0.5)
    clear += 0.002 * rng.standard_normal(clear.shape)
    clear = np.clip(clear, 0.0, 1.0).astype(np.float32)

    cloudy = clear.copy()
    if cloud_fraction > 0.0:
        lift = rng.uniform(0.35, 0.45, len(CLOUD_BANDS))
        cloudy = _calibrated_clouds(clear, _blob_field(rng, H, W), lift, cloud_fraction)

    relief = abundance[1] + 0.5 * abundance[2]
    edges = np.hypot(sobel(relief, 0, mode="nearest"), sobel(relief, 1, mode="nearest"))
    edges /= max(edges.max(), 1e-12)
    vv = 0.3 + 0.3 * relief + 0.3 * edges
    vh = 0.2 + 0.4 * abundance[0] + 0.2 * relief * edges
    sar = np.stack([vv, vh]) + 0.01 * rng.standard_normal((2, H, W))
    sar = np.clip(sar, 0.0, 1.0).astype(np.float32)

    tag = f"syn{seed:06d}-{H}x{W}-f{int(round(cloud_fraction * 1000)):04d}"
    return PatchTriplet(OpticalPatch(cloudy), OpticalPatch(clear), SarPatch(sar), id=tag)


def split_of(patch_id: str, fractions=(0.8, 0.1, 0.1)) -> str:
    """Assign an id to train/val/test by hashing, stable across runs and machines."""
    bucket = int.from_bytes(hashlib.sha256(patch_id.encode()).digest()[:8], "little") / 2**64
    if bucket < fractions[0]:
        return "train"
    if bucket < fractions[0] + fractions[1]:
        return "val"
    return "test"


TRIPLET_SUFFIXES = {"cloudy": "_cloudy.bin", "clear": "_clear.bin", "sar": "_sar.bin"}


def save_triplet(directory, triplet: PatchTriplet) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_patch(directory / f"{triplet.id}{TRIPLET_SUFFIXES['cloudy']}", triplet.cloudy)
    save_patch(directory / f"{triplet.id}{TRIPLET_SUFFIXES['clear']}", triplet.clear)
    save_patch(directory / f"{triplet.id}{TRIPLET_SUFFIXES['sar']}", triplet.sar)


def load_dataset(directory, split: str | None = None) -> list[PatchTriplet]:
    """Load every ``<id>_cloudy.bin / _clear.bin / _sar.bin`` triplet, sorted by id."""
    directory = Path(directory)
    if not directory.is_dir():
        raise ValidationError(f"{directory} is not a directory")
    ids = sorted(p.name[: -len(TRIPLET_SUFFIXES["cloudy"])] for p in directory.glob("*_cloudy.bin"))
    triplets = []
    for pid in ids:
        if split is not None and split_of(pid) != split:
            continue
        parts = {k: directory / f"{pid}{suffix}" for k, suffix in TRIPLET_SUFFIXES.items()}
        missing = [str(p) for p in parts.values() if not p.exists()]
        if missing:
            raise ValidationError(f"incomplete triplet {pid!r}: missing {missing}")
        triplets.append(
            PatchTriplet(
                load_patch(parts["cloudy"], "optical"),
                load_patch(parts["clear"], "optical"),
                load_patch(parts["sar"], "sar"),
                id=pid,
            )
        )
    if not triplets:
        raise ValidationError(f"no patch triplets found in {directory}" + (f" for split {split!r}" if split else ""))
    return triplets
