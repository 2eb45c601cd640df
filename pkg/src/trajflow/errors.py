"""Exception types shared across the package.

Two failure families matter to callers: bad inputs (files, configs,
shapes, preconditions) and numerical faults (non-finite activations,
singular matrices). The CLI maps them to exit codes 1 and 2.
"""


class TrajflowError(Exception):
    """Base class for all package errors."""


class ValidationError(TrajflowError, ValueError):
    """Invalid input data, file, configuration, or violated precondition."""


class ParseError(ValidationError):
    """Malformed on-disk record; message names the offending file/line."""


class ShapeError(ValidationError):
    """Operand shapes do not agree; message names the operands."""


class NumericalFault(TrajflowError, ArithmeticError):
    """Numerical failure: non-finite values, singular covariance, etc."""
