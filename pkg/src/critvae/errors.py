"""Exception types shared across the package."""


class CritVaeError(Exception):
    """Base class for package errors."""


class DimensionError(CritVaeError, ValueError):
    """Array shapes are incompatible with the requested operation."""


class NumericError(CritVaeError, ValueError):
    """Non-finite values or a numerically invalid configuration."""


class GradCheckError(CritVaeError, RuntimeError):
    """Gradient check could not be run (e.g. loss is non-deterministic)."""


class ConfigError(CritVaeError, ValueError):
    """Invalid training / simulation / CLI configuration."""


class UnsupportedModalityError(CritVaeError, ValueError):
    """Modality not present in the chosen model variant."""


class TrainingDivergedError(CritVaeError, RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ParseError(CritVaeError, ValueError):
    """Malformed input row; carries the 1-based line number."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class EmptyDatasetError(CritVaeError, ValueError):
    """No usable records after parsing / filtering."""


class CheckpointError(CritVaeError, ValueError):
    """Corrupt, truncated or mismatched checkpoint file."""


class DegenerateTargetsWarning(UserWarning):
    """All-zero target row: log-likelihood degenerates to 0."""
