"""Exception hierarchy shared by all modules."""


class BilevelError(Exception):
    """Base class for every error raised by the package."""


class ValidationError(BilevelError, ValueError):
    """A parameter or configuration violates a documented constraint.

    ``path`` names the offending field (dotted config path when known).
    """

    def __init__(self, message, path=None):
        self.path = path
        self.message = message
        if path:
            message = f"{path}: {message}"
        super().__init__(message)


class MissingOracle(BilevelError):
    """A diagnostic needs oracle data (x*, projector, ...) that the problem lacks."""


class UnsupportedProxCombination(BilevelError):
    """No exact way to evaluate prox of fhat + eps*hhat for this pair of terms."""


class NonPositiveValues(BilevelError, ValueError):
    """A log-log fit was asked for on a window with non-positive values."""


class DimensionOverflow(BilevelError, ValueError):
    """The lifted feature dimension exceeds the configured cap."""


class RankDeficient(BilevelError, ValueError):
    """A random design matrix failed to have full row rank."""


class NonSmoothProblem(BilevelError, ValueError):
    """The flow integrators only accept problems with fhat = hhat = 0."""


class IoError(BilevelError, OSError):
    """A file could not be read or written."""


class ParseError(BilevelError, ValueError):
    """A data file could not be parsed; ``line`` is 1-based."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NonBinaryLabel(ParseError):
    """A label column entry is not 0 or 1."""
