"""Exception hierarchy shared by all modules."""


class DelaySdeError(Exception):
    """Base class for errors raised by this package."""


class NonCommensurate(DelaySdeError, ValueError):
    pass


class InsufficientHistory(DelaySdeError, ValueError):
    pass


class NotDivisible(DelaySdeError, ValueError):
    pass


class NumericalBlowup(DelaySdeError, ArithmeticError):
    pass


class GapTooLarge(DelaySdeError, ValueError):
    pass


class DimensionMismatch(DelaySdeError, ValueError):
    pass


class QuadratureFailure(DelaySdeError, ArithmeticError):
    pass


class Divergence(DelaySdeError, ArithmeticError):
    """Training loss became non-finite."""


class PathTooShort(DelaySdeError, ValueError):
    pass


class MaxItersExceeded(DelaySdeError, RuntimeError):
    pass


class GuardUnsatisfiable(DelaySdeError, RuntimeError):
    pass


class SingularDesign(DelaySdeError, ArithmeticError):
    pass


class LengthMismatch(DelaySdeError, ValueError):
    pass


class SingleClass(DelaySdeError, ValueError):
    pass


class NegativeLogArgument(DelaySdeError, ValueError):
    pass


class MissingColumns(DelaySdeError, ValueError):
    pass


class NonUniformSampling(DelaySdeError, ValueError):
    pass


class ConfigError(DelaySdeError, ValueError):
    pass
