# exceptions.py - Error hierarchy for conformal risk control

"""
Errors raised by the calibration, gradient and harness modules.

Contract violations also derive from ValueError so callers that only
know about built-in exceptions still catch them.
"""


class ConformalRiskError(Exception):
    """Base class for every error raised by this package"""


class BoundViolation(ConformalRiskError, ValueError):
    """A loss exceeds the upper bound B at some lambda"""


class EmptyCalibration(ConformalRiskError, ValueError):
    """Calibration was requested with no losses"""


class EmptySamples(ConformalRiskError, ValueError):
    """A risk estimate was requested from an empty sample"""


class NonFiniteObjective(ConformalRiskError, ValueError):
    """A disutility evaluation overflowed"""


class NoPositivePixels(ConformalRiskError, ValueError):
    """The FNR loss is undefined for an image without positive pixels"""


class NoNegativePixels(ConformalRiskError, ValueError):
    """The soft-FPR cost is undefined for an image without negative pixels"""


class EmptyGrid(ConformalRiskError, ValueError):
    """No candidate value of t lies inside [B(lambda_min), alpha]"""


class DimensionMismatch(ConformalRiskError, ValueError):
    """Gradient vectors of different lengths were combined"""


class BatchTooSmall(ConformalRiskError, ValueError):
    """A training batch cannot be split into two nonempty halves"""


class NonMonotoneLoss(ConformalRiskError, ValueError):
    """A loss required to be nondecreasing in lambda is not"""


class UnsupportedProblem(ConformalRiskError, ValueError):
    """The inputs fall outside the cases the solver handles"""


class ConfigError(ConformalRiskError, ValueError):
    """A configuration failed validation"""

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class LossFormatError(ConformalRiskError, ValueError):
    """A line of a loss file could not be parsed"""


class DegenerateGradient(ConformalRiskError, ValueError):
    """dlambda/dtheta is not defined at this parameter value"""


class TieDetected(DegenerateGradient):
    """Two thresholds coincide, so the active jump is ambiguous"""


class KinkAtSolution(DegenerateGradient):
    """A transformed loss sits on the kink of the disutility"""


class SingularKKT(DegenerateGradient):
    """The KKT Jacobian is singular or badly conditioned"""
