"""Exception hierarchy shared by every module."""


class ScoreVCError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(ScoreVCError, ValueError):
    """Invalid argument, configuration, or data content."""


class ShapeError(ValidationError):
    """Tensor shape mismatch.

    ``axis`` names the offending axis when one can be singled out.
    """

    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class NumericalError(ScoreVCError, RuntimeError):
    """A computation produced non-finite values."""


class ParseError(ScoreVCError, ValueError):
    """Malformed binary or text file. ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DimensionError(ParseError):
    """File header disagrees with the amount of payload present."""
