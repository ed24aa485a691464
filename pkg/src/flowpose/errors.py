"""Exception types shared across the package."""


class FlowposeError(Exception):
    """Base class for all package errors.

    ``stage`` names the pipeline stage that failed, when known.
    """

    def __init__(self, message, stage=None):
        super().__init__(message)
        self.stage = stage

    def __str__(self):
        msg = super().__str__()
        return f"[{self.stage}] {msg}" if self.stage else msg


class ValidationError(FlowposeError, ValueError):
    """Bad input: wrong shapes, out-of-range parameters, empty clouds."""


class DegenerateError(FlowposeError):
    """Numerically degenerate configuration (collinear points, single-class labels)."""


class DivergenceError(FlowposeError):
    """A non-finite value appeared during training or integration."""


class ParseError(FlowposeError, ValueError):
    """Malformed file. Carries the 1-based line number or byte offset."""

    def __init__(self, message, path=None, line=None, offset=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"offset {offset}")
        if where:
            message = f"{': '.join([', '.join(where), message])}"
        super().__init__(message, stage="io")
        self.path = path
        self.line = line
        self.offset = offset
