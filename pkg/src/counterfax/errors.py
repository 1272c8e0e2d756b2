class CounterfaxError(Exception):
    pass


class ConfigError(CounterfaxError, ValueError):
    pass


class FormatError(CounterfaxError, ValueError):
    """Raised when an input file does not follow its declared binary format."""


class ShapeError(CounterfaxError, ValueError):
    pass


class UndefinedMetricError(CounterfaxError, ValueError):
    """A metric is mathematically undefined for the given inputs (e.g. AUC on one class)."""


class SampleSizeError(CounterfaxError, ValueError):
    pass


class NumericalError(CounterfaxError, ArithmeticError):
    pass


class DegenerateMetricWarning(UserWarning):
    pass
