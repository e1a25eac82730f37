"""
Exception hierarchy for the moment-measure toolkit
"""


class MomentSolverError(Exception):
    """Base class for every error raised by this package"""


class InvalidMeasureError(MomentSolverError, ValueError):
    """Target measure is empty, has non-positive weights or bad shapes"""


class InvalidPotentialError(MomentSolverError, ValueError):
    """Potential data is malformed (duplicate atoms, shape mismatch)"""


class IntegrabilityError(MomentSolverError, ValueError):
    """exp(-psi) is not integrable: the origin is not interior to the atom hull"""


class DivergentIntegralError(MomentSolverError, ValueError):
    """An exponential-affine integral over an unbounded region diverges"""


class DegeneratePolygonError(MomentSolverError, ValueError):
    """Polygon has zero area or intersects itself"""


class ImportanceVarianceError(MomentSolverError, RuntimeError):
    """Importance weights are too heavy-tailed for the chosen proposal"""


class NonMonotoneBranchError(MomentSolverError, ValueError):
    """The increasing branch of a one-dimensional potential is not monotone"""


class ConvergenceError(MomentSolverError, RuntimeError):
    """An inner iteration did not converge within its budget"""


class ToleranceBelowNoiseError(MomentSolverError, ValueError):
    """Requested gradient tolerance is below the Monte Carlo noise floor"""


class PreconditionError(MomentSolverError, ValueError):
    """A check was called on input that violates its precondition"""


class UnknownCaseError(MomentSolverError, KeyError):
    """Unknown gallery case or check suite name"""


class FileFormatError(MomentSolverError, ValueError):
    """An input file could not be parsed"""
