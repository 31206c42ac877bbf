"""Simulator exception hierarchy.

Every error raised on purpose by the simulator derives from SimulatorError and
carries the process exit code the CLI should return for it.
"""

from typing import Optional


class SimulatorError(Exception):
    """Base class for all simulator errors."""

    exit_code: int = 1

    def __init__(self, message: str, cause: Optional[Exception] = None):
        self.message = message
        self.cause = cause
        super().__init__(message)


class DimensionError(SimulatorError):
    """Raised when tensor or vector shapes do not agree."""

    def __init__(self, operation: str, *shapes):
        self.operation = operation
        self.shapes = tuple(tuple(s) if isinstance(s, (tuple, list)) else s for s in shapes)
        rendered = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{operation}: incompatible shapes {rendered}")


class ContractError(SimulatorError):
    """Raised when a caller violates an operation's precondition."""


class DomainError(SimulatorError):
    """Raised when a numeric op would leave its mathematical domain."""


class InputError(SimulatorError):
    """Raised for invalid data handed to an operation (e.g. out-of-range labels)."""


class ParseError(SimulatorError):
    """Raised when an input file cannot be parsed."""

    def __init__(self, message: str, line_number: Optional[int] = None, cause: Optional[Exception] = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message, cause)


class ConfigError(SimulatorError):
    """Raised for invalid or unreadable configuration."""

    exit_code = 2


class ParameterError(SimulatorError):
    """Raised when generator parameters cannot be satisfied."""


class PartitionInfeasibleError(SimulatorError):
    """Raised when no valid partition can be drawn for the requested spec."""


class CheckpointError(SimulatorError):
    """Raised when a checkpoint file is corrupt or incompatible."""
