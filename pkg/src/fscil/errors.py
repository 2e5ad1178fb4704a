"""Exception hierarchy shared across the package.

The CLI maps these onto stable exit codes: ConfigError -> 2,
DataFormatError -> 3, NumericalError -> 4, everything else -> 1.
"""


class FscilError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatchError(FscilError):
    """An operand has the wrong dimensionality."""

    def __init__(self, what: str, expected, actual):
        super().__init__(f"{what}: expected dimension {expected}, got {actual}")
        self.expected = expected
        self.actual = actual


class TapeError(FscilError):
    """A backward pass was given a tape from a different forward pass."""


class ZeroVectorError(FscilError):
    """A direction-dependent operation received a zero-norm vector."""


class NumericalError(FscilError):
    """A non-finite value or degenerate quantity appeared where it must not."""


class DataFormatError(FscilError):
    """A serialized artifact is malformed, truncated, or inconsistent."""


class ConfigError(FscilError):
    """A run configuration is invalid or internally inconsistent."""


class ProtocolViolationError(FscilError):
    """Training code tried to read data the incremental protocol forbids."""
