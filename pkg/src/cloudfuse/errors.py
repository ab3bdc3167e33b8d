"""Exception hierarchy shared by every module."""


class CloudfuseError(Exception):
    pass


class ValidationError(CloudfuseError, ValueError):
    """Input violates a documented precondition."""


class ShapeError(ValidationError):
    """Tensor shapes are incompatible with the requested operation."""


class PatchFormatError(ValidationError):
    """Patch file header is malformed."""


class PatchCorruptionError(ValidationError):
    """Patch payload disagrees with its header."""


class ConfigMismatchError(ValidationError):
    """A checkpoint was built for a different configuration."""

    def __init__(self, diff: dict):
        self.diff = diff
        lines = [f"  {k}: checkpoint={a!r} requested={b!r}" for k, (a, b) in sorted(diff.items())]
        super().__init__("configuration mismatch:\n" + "\n".join(lines))


class TrainingAborted(CloudfuseError, RuntimeError):
    """Training hit a non-finite loss."""
