"""
Exception hierarchy for the lifting library.

Each error carries the process exit code the management commands report for it:
1 for validation problems, 2 for numerical failures, 3 for I/O and file formats.
"""

from typing import Optional, Sequence


class KTPError(Exception):
    """Base class for every error raised by the lifting library."""
    exit_code = 1
    kind = 'validation'


class ShapeMismatchError(KTPError, ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, message: str, *shapes: Sequence[int]):
        self.shapes = tuple(tuple(s) for s in shapes)
        if self.shapes:
            rendered = ' vs '.join(str(s) for s in self.shapes)
            message = f"{message}: {rendered}"
        super().__init__(message)


class ConfigurationError(KTPError, ValueError):
    """Invalid model, loss, optimizer or synthesis configuration."""


class NumericalError(KTPError, ArithmeticError):
    """NaN propagation or a non-finite gradient."""
    exit_code = 2
    kind = 'numerical'

    def __init__(self, message: str, parameter: Optional[str] = None):
        self.parameter = parameter
        if parameter:
            message = f"{message} (parameter {parameter})"
        super().__init__(message)


class FormatError(KTPError, ValueError):
    """Malformed clip, skeleton, checkpoint or optimizer-state file."""
    exit_code = 3
    kind = 'format'

    def __init__(self, message: str, byte_offset: Optional[int] = None, path: Optional[str] = None):
        self.byte_offset = byte_offset
        self.path = path
        if byte_offset is not None:
            message = f"{message} at byte {byte_offset}"
        if path:
            message = f"{path}: {message}"
        super().__init__(message)
