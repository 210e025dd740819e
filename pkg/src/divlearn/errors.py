"""Exception types raised across the package."""


class DivlearnError(Exception):
    """Base class for all errors raised by divlearn."""


class RankDeficient(DivlearnError, ValueError):
    pass


class NotSymmetric(DivlearnError, ValueError):
    pass


class NoConvergence(DivlearnError, RuntimeError):
    pass


class Singular(DivlearnError, ValueError):
    pass


class NotOrthonormal(DivlearnError, ValueError):
    pass


class BadDims(DivlearnError, ValueError):
    pass


class BadOptions(DivlearnError, ValueError):
    pass


class BadTaskId(DivlearnError, IndexError):
    pass


class NotApplicable(DivlearnError, ValueError):
    """Raised when a quantity is undefined for a family.

    ``bound`` optionally carries the best available substitute value.
    """

    def __init__(self, message, bound=None):
        super().__init__(message)
        self.bound = bound


class DimMismatch(DivlearnError, ValueError):
    pass


class IncompatibleVariants(DivlearnError, TypeError):
    pass


class BadLabel(DivlearnError, ValueError):
    pass


class Empty(DivlearnError, ValueError):
    pass


class EmptyData(DivlearnError, ValueError):
    pass


class Diverged(DivlearnError, FloatingPointError):
    pass


class NotLinearGaussian(DivlearnError, ValueError):
    pass


class MethodUnsupported(DivlearnError, ValueError):
    pass


class BadClassSpec(DivlearnError, TypeError):
    pass


class BadDelta(DivlearnError, ValueError):
    pass


class TooLarge(DivlearnError, ValueError):
    pass


class NotLinear(DivlearnError, ValueError):
    pass


class ParseError(DivlearnError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class UnknownKey(ParseError):
    pass


class MissingColumn(DivlearnError, KeyError):
    pass
