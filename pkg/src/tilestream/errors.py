"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Array dimensions do not match what the operation expects."""


class DataError(ValueError):
    """Input data contains non-finite values or is otherwise unusable."""


class NumericalError(ArithmeticError):
    """A linear-algebra routine failed or produced non-finite output."""


class RankDeficientError(NumericalError):
    """Initial data for the subspace tracker does not have rank >= k."""


class FilterDegenerate(NumericalError):
    """Forward-filter normalizer underflowed; the caller should teleport."""


class FormatError(ValueError):
    """A matrix file or checkpoint header is malformed."""


class InsufficientDataError(ValueError):
    """A stream is too short for the requested evaluation."""


class IntegrationDiverged(RuntimeError):
    """Fixed-step integration left the representable range."""
