"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so new error conditions
should reuse one of the classes below rather than raising bare
ValueError/RuntimeError.
"""


class VidFuseError(Exception):
    """Base class for all package errors."""


class ConfigError(VidFuseError):
    """Invalid configuration value; message names the offending field."""


class ShapeError(VidFuseError):
    """Tensor rank or dimensions do not match the operation's contract."""


class ContractError(VidFuseError):
    """A caller or callback violated an internal API contract."""


class StoreLookupError(VidFuseError, KeyError):
    """Requested attention-store key is absent."""

    def __str__(self) -> str:  # KeyError quotes its arg; keep plain text
        return Exception.__str__(self)


class VocabularyError(VidFuseError):
    """Token id outside the embedding table."""


class TensorFormatError(VidFuseError):
    """Malformed tensor or frame file; message carries the byte offset."""


class FrameIOError(VidFuseError):
    """Missing, misnumbered, or inconsistent frame files."""


class NumericalError(VidFuseError):
    """A numerical-domain violation (division by zero signal, NaN loss)."""


class TrainingError(NumericalError):
    """Training diverged; message carries the step number."""


class MetricError(VidFuseError):
    """Metric undefined for the given inputs."""
