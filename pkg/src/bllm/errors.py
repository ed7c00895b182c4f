"""Exception types shared across the package.

Each maps to one CLI exit code family: config errors exit 2, data errors 3,
training aborts 4, evaluation errors 5.
"""


class BllmError(Exception):
    """Base class for all package errors."""


class ShapeError(BllmError):
    """Operand shapes are incompatible; message names both shapes."""


class GradientError(BllmError):
    """A gradient was rejected (non-finite, or missing where required)."""


class ConfigError(BllmError):
    """Invalid configuration. Carries the full violation list."""

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class ParseError(BllmError):
    """Malformed input text; message includes line/column when known."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        super().__init__(message)


class ValidationError(BllmError):
    """A structurally valid record violates an invariant; names the field."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class DataError(BllmError):
    """Missing or unusable data artifact (files, corpora, checkpoints)."""


class ContractError(BllmError):
    """An operation was called outside its documented contract."""


class TrainAbort(BllmError):
    """Training stopped early; message carries the step diagnostic."""

    def __init__(self, message, step=None):
        self.step = step
        super().__init__(message)


class EvalError(BllmError):
    """Evaluation could not complete."""


class FitError(BllmError):
    """Curve fitting failed (underdetermined or rank-deficient)."""
