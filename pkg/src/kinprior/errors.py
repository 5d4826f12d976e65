"""Exception hierarchy shared by all kinprior modules."""


class KinpriorError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(KinpriorError):
    """Invalid or unreadable configuration."""


class DataError(KinpriorError):
    """Malformed dataset, trajectory or scene file."""


class NumericalError(KinpriorError):
    """A computation produced or received non-finite values."""


class ValidationFailure(KinpriorError):
    """An analytical result disagreed with its oracle."""


# core
class DegenerateGaussian(NumericalError, ValueError):
    pass


class InvalidCorrelation(NumericalError, ValueError):
    pass


class EmptyMixture(ValueError, KinpriorError):
    pass


class UnnormalizedMixture(ValueError, KinpriorError):
    pass


# propagation
class NonFiniteInput(NumericalError, ValueError):
    pass


class LinearizationDomain(NumericalError, ValueError):
    pass


class SteeringDomain(NumericalError, ValueError):
    pass


class ControlLengthMismatch(ValueError, KinpriorError):
    pass


# oracle
class ResourceLimit(KinpriorError):
    pass


# autodiff
class NonFiniteForward(NumericalError):
    pass


# cfm
class CollisionState(NumericalError):
    """A follower's gap to its leader became non-positive."""

    def __init__(self, message, vehicle=None, step=None):
        super().__init__(message)
        self.vehicle = vehicle
        self.step = step


class InvalidHistory(DataError):
    pass


class FitDiverged(NumericalError):
    """Parameter fit stopped improving; ``best`` holds the best-so-far estimate."""

    def __init__(self, message, best=None, loss=None):
        super().__init__(message)
        self.best = best
        self.loss = loss


class ZeroVector(ValueError, KinpriorError):
    pass


class InvalidAlpha(ValueError, KinpriorError):
    pass


# forecast
class GenerationFailed(DataError):
    pass
