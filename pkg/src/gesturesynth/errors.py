"""Exception types shared across the package.

The CLI maps these onto exit codes: argument/config problems exit 2,
numeric/training failures exit 3, IO failures exit 4.
"""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """A component violated an interface contract (e.g. wrong output shape)."""


class ConfigError(ValueError):
    """A configuration file or option is invalid."""


class ParseError(ValueError):
    """A data file is malformed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(RuntimeError):
    """Training hit a non-recoverable numeric condition."""


class NumericError(ArithmeticError):
    """A numeric routine left its domain of validity."""


class MetricError(ValueError):
    """A metric is undefined for the given inputs."""
