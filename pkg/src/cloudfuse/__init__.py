"""SAR-optical fusion network for cloud-free Sentinel-2 reconstruction."""

from cloudfuse.errors import (
    CloudfuseError,
    ConfigMismatchError,
    PatchCorruptionError,
    PatchFormatError,
    ShapeError,
    TrainingAborted,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "CloudfuseError",
    "ConfigMismatchError",
    "PatchCorruptionError",
    "PatchFormatError",
    "ShapeError",
    "TrainingAborted",
    "ValidationError",
]
