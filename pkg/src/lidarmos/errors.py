class MosError(Exception):
    """Base class for errors raised by lidarmos."""


class FormatError(MosError, ValueError):
    pass


class ValidationError(MosError, ValueError):
    pass


class CalibrationError(MosError, ValueError):
    pass


class PreconditionError(MosError, ValueError):
    pass


class ConfigurationError(MosError, ValueError):
    pass


class NumericError(MosError, ArithmeticError):
    pass


class DivergenceError(NumericError):
    pass
