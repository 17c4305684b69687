"""Exception types shared across the package."""


class GHRError(Exception):
    """Base class for all errors raised by this package."""


class IndexOutOfRange(GHRError):
    pass


class DuplicateEdge(GHRError):
    pass


class SelfLoop(GHRError):
    pass


class ShapeMismatch(GHRError):
    pass


class InvalidAssignment(GHRError):
    pass


class NonDivisibleBlock(GHRError):
    pass


class LossNotScalar(GHRError):
    pass


class EmptyMask(GHRError):
    pass


class GenerationExhausted(GHRError):
    pass
