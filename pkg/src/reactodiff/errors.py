"""Exception hierarchy shared by all modules."""


class ReactoDiffError(Exception):
    """Base class for every error raised by the package."""


class NonPositiveExtent(ReactoDiffError, ValueError):
    pass


class UnsupportedDimension(ReactoDiffError, ValueError):
    pass


class EllipticityViolation(ReactoDiffError, ValueError):
    pass


class DimensionMismatch(ReactoDiffError, ValueError):
    pass


class InvalidField(ReactoDiffError, ValueError):
    pass


class LeadingCoefficientViolation(ReactoDiffError, ValueError):
    pass


class IndexBelowShift(ReactoDiffError, ValueError):
    pass


class NoConvergence(ReactoDiffError, RuntimeError):
    pass


class SingularResolvent(ReactoDiffError, ArithmeticError):
    pass


class SingularStep(ReactoDiffError, ArithmeticError):
    pass


class NegativeInterval(ReactoDiffError, ValueError):
    pass


class DegenerateKernel(ReactoDiffError, ValueError):
    pass


class GridMismatch(ReactoDiffError, ValueError):
    pass


class ModeDisagreement(ReactoDiffError, RuntimeError):
    pass


class AlphaOutOfRange(ReactoDiffError, ValueError):
    pass


class RegularityPreconditionFailed(ReactoDiffError, RuntimeError):
    pass


class SequenceNotCauchy(ReactoDiffError, ValueError):
    pass


class ConfigInvalid(ReactoDiffError, ValueError):
    """Raised with the dotted path of the offending config field."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class IoFailure(ReactoDiffError, OSError):
    pass
