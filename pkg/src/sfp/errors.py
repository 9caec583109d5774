"""Exception hierarchy shared by every module."""


class SfpError(Exception):
    """Base class for all library errors."""


class InvalidInput(SfpError, ValueError):
    pass


class ZeroMatrix(InvalidInput):
    pass


class NumericalFailure(SfpError, ArithmeticError):
    pass


class Diverged(NumericalFailure):
    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"training diverged at step {step}")


class DegenerateDenominator(NumericalFailure):
    pass


class DegenerateProportions(InvalidInput):
    pass


class FormatError(SfpError):
    pass


class InconsistentFiles(SfpError):
    pass


class InsufficientData(SfpError):
    pass


class InsufficientFeatures(SfpError):
    pass
