"""Exception hierarchy shared by the filtering, smoothing and learning code."""


class SmcError(Exception):
    """Base class for all errors raised by this package."""


class AllWeightsZeroError(SmcError, ValueError):
    """Every particle (or categorical weight) carries zero mass."""


class NegativeWeightError(SmcError, ValueError):
    """A categorical weight is negative, NaN or infinite."""


class ZeroBackwardMassError(SmcError):
    """The backward kernel row has a zero normalising constant."""


class MissingDensityUpperBoundError(SmcError, ValueError):
    """Accept-reject sampling was requested for a model without a density bound."""


class NonpositiveBoundError(SmcError, ValueError):
    pass


class BelowParticleThresholdError(SmcError, ValueError):
    """N does not exceed the strong-mixing threshold N_t."""

    def __init__(self, n_min, message=None):
        self.n_min = n_min
        super().__init__(message or f"particle count must exceed {n_min}")


class SingularCovarianceError(SmcError, ValueError):
    pass


class SingularInnovationError(SmcError):
    pass


class NonFiniteGradientError(SmcError, FloatingPointError):
    pass


class UnsupportedParameterError(SmcError, ValueError):
    pass


class ConfigError(SmcError, ValueError):
    """Invalid experiment configuration."""
