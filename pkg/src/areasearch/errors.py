"""Exception types raised across the package."""


class AreaSearchError(Exception):
    pass


class InfeasibleScenario(AreaSearchError):
    """Scenario counts cannot be realised on the requested grid."""


class ActionArityMismatch(AreaSearchError):
    pass


class DomainError(AreaSearchError, ValueError):
    pass


class ShapeMismatch(AreaSearchError, ValueError):
    pass


class LengthMismatch(AreaSearchError, ValueError):
    pass


class NonFiniteGradient(AreaSearchError, FloatingPointError):
    pass


class NonFiniteLoss(AreaSearchError, FloatingPointError):
    pass


class ConfigError(AreaSearchError, ValueError):
    pass
