"""Exception hierarchy shared by every hmpe module.

The CLI maps these to exit codes: `VerificationError` exits with 2, every other
`HmpeError` with 1.
"""
from typing import Optional, Sequence


class HmpeError(Exception):
    """Base class for all hmpe errors."""


class ShapeError(HmpeError, ValueError):
    """Two operands disagree on shape."""

    def __init__(self, what: str, expected: Sequence[int], got: Sequence[int]):
        self.expected = tuple(expected)
        self.got = tuple(got)
        super().__init__(f"{what}: expected shape {self.expected}, got {self.got}")


class DomainError(HmpeError, ValueError):
    """A scalar argument is outside its admissible range."""


class ConfigError(HmpeError, ValueError):
    """A configuration key holds an invalid value."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"config key '{key}': {message}")


class FormatError(HmpeError, ValueError):
    """A file on disk does not follow its declared format."""


class NoHotQueriesError(HmpeError):
    """No query scored strictly above the heat threshold."""

    def __init__(self, tau: float, best: Optional[float] = None):
        self.tau = tau
        self.best = best
        hint = "" if best is None else f" (best score {best:.6g})"
        super().__init__(f"no hot queries above tau={tau}{hint}; lower tau")


class StageError(HmpeError):
    """A pipeline stage failed; the original error is chained as the cause."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        super().__init__(f"stage '{stage}' failed: {cause}")


class VerificationError(HmpeError):
    """A verification harness found a tolerance breach or a hash mismatch."""
