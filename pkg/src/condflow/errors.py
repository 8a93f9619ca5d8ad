"""Exception types shared across the package."""


class CondFlowError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(CondFlowError, ValueError):
    pass


class UnsupportedError(CondFlowError, NotImplementedError):
    pass


class SingularTimeError(CondFlowError, ValueError):
    """A (1 - t)^-1 field was evaluated at t >= 1."""


class NumericError(CondFlowError, ArithmeticError):
    pass


class NonConvergenceError(CondFlowError, RuntimeError):
    """An iterative routine ran out of its step/iteration budget.

    ``partial`` carries whatever intermediate result was available.
    """

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class NotFoundError(CondFlowError, LookupError):
    pass


class EmptyResultError(CondFlowError, ValueError):
    def __init__(self, message, count=0):
        super().__init__(message)
        self.count = count


class DegenerateFilterError(NumericError):
    pass


class ConfigError(CondFlowError, ValueError):
    """Bad configuration file. ``key`` and ``line`` locate the problem when known."""

    def __init__(self, message, key=None, line=None):
        loc = []
        if key is not None:
            loc.append(f"key {key!r}")
        if line is not None:
            loc.append(f"line {line}")
        if loc:
            message = f"{message} ({', '.join(loc)})"
        super().__init__(message)
        self.key = key
        self.line = line
