"""Exception types raised across the package."""
from __future__ import annotations


class FormatError(ValueError):
    """A file does not follow its binary/text layout."""

    def __init__(self, message: str, path: str = "<bytes>", offset: int | None = None):
        self.path = path
        self.offset = offset
        where = f"{path}" if offset is None else f"{path} at byte {offset}"
        super().__init__(f"{where}: {message}")


class ConfigMismatchError(ValueError):
    """A checkpoint was produced under a different configuration."""


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, step: int, breakdown: dict[str, float]):
        self.step = step
        self.breakdown = dict(breakdown)
        parts = ", ".join(f"{k}={v!r}" for k, v in self.breakdown.items())
        super().__init__(f"non-finite loss at step {step} ({parts})")
