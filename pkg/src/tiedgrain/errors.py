"""Exception hierarchy shared by every module."""


class TiedGrainError(Exception):
    """Base class for all engine errors."""


class ConfigError(TiedGrainError, ValueError):
    """Invalid configuration: bad ranges, shapes that do not compose, unknown keys."""

    def __init__(self, message, path=None):
        self.path = path
        if path:
            message = f"{path}: {message}"
        super().__init__(message)


class DimensionError(TiedGrainError, ValueError):
    """Operand shapes are incompatible."""


class FormatError(TiedGrainError, ValueError):
    """A file on disk is malformed."""


class NumericError(TiedGrainError, ArithmeticError):
    """A NaN/Inf appeared or an iteration failed to behave."""


class DivergenceError(NumericError):
    def __init__(self, message, iteration):
        self.iteration = iteration
        super().__init__(f"{message} (iteration {iteration})")


class NonConvergenceError(NumericError):
    pass
