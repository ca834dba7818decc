"""Exception hierarchy.

Geometry and configuration problems derive from :class:`BhpLabError`;
failures of a numerical procedure derive from :class:`NumericalError` so the
runner can map them to a distinct exit status.
"""


class BhpLabError(Exception):
    """Base class for all package errors."""


class NumericalError(BhpLabError):
    """A numerical procedure failed (singular system, no convergence, ...)."""


# geometry
class DegenerateDomain(BhpLabError):
    pass


class DisconnectedGrid(BhpLabError):
    pass


class EmptySample(BhpLabError):
    pass


class NoInteriorAnchor(NumericalError):
    pass


# forms
class EllipticityViolation(BhpLabError):
    pass


class NegativeKilling(BhpLabError):
    pass


class NonConvergence(NumericalError):
    pass


# solve
class SingularSystem(NumericalError):
    pass


class StepRejection(NumericalError):
    pass


class ObstacleActive(UserWarning):
    """Emitted (not raised) when the reduced equilibrium problem overshoots 1
    and the obstacle solver takes over."""


# potential / bhp
class WidthOverflow(NumericalError):
    pass


class DegenerateRegression(NumericalError):
    pass


class ScaleTooFine(BhpLabError):
    pass


class ConfigError(BhpLabError):
    pass


class ExpressionError(BhpLabError):
    pass
