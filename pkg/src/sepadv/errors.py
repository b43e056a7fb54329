"""Exception hierarchy shared by every module."""


class SepAdvError(Exception):
    """Base class for all errors raised by this package."""


class ParameterError(SepAdvError, ValueError):
    pass


class FormatError(SepAdvError, ValueError):
    """A file does not match the expected layout (WAV, weight file)."""


class UnsupportedFormatError(FormatError):
    pass


class NumericError(SepAdvError, ArithmeticError):
    """A computation produced NaN/Inf where a finite value was required."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class UndefinedMetricError(SepAdvError, ValueError):
    pass


class PlanValidationError(ParameterError):
    pass


class ConfigError(ParameterError):
    pass
