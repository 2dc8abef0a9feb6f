"""Exception hierarchy shared by all modules."""


class MalflowError(Exception):
    """Base class for library errors."""


class InvalidArgument(MalflowError, ValueError):
    pass


class OutOfRange(MalflowError, ValueError):
    pass


class NumericOverflow(MalflowError, ArithmeticError):
    """A state became non-finite; ``step`` names the offending grid step."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class CapabilityError(MalflowError):
    """The drift lacks the smoothness (or dimension) an operation needs."""


class DomainError(MalflowError, ValueError):
    pass


class ConfigError(MalflowError, ValueError):
    pass
