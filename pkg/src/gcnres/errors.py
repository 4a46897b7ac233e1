"""Exception types shared across the package."""


class GcnError(Exception):
    pass


class ValidationError(GcnError, ValueError):
    pass


class ShapeError(GcnError, ValueError):
    pass


class ParseError(GcnError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class RangeError(GcnError, IndexError):
    pass


class FormatError(GcnError, ValueError):
    pass


class NumericalError(GcnError, FloatingPointError):
    pass


class UndefinedMetricError(GcnError, ValueError):
    pass
