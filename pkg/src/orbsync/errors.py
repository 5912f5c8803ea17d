"""Exception hierarchy for orbsync."""


class OrbSyncError(Exception):
    """Base class for all toolkit errors."""


class NonFiniteState(OrbSyncError):
    """An integrated state became NaN or infinite."""


class NonFiniteValue(OrbSyncError):
    """A function probe returned NaN or infinite values."""


class NotConverged(OrbSyncError):
    """A periodic fixed-point iteration did not close within its budget."""


class RiccatiNotConverged(NotConverged):
    pass


class NotStabilizing(OrbSyncError):
    """A synthesized gain leaves a Floquet multiplier on or outside the unit circle."""


class NoCycleFound(OrbSyncError):
    pass


class NonTransversal(OrbSyncError):
    """The flow crosses the Poincare section (almost) tangentially."""


class OutOfTube(OrbSyncError):
    """The state left the neighbourhood where the transverse chart is valid."""

    def __init__(self, message, distance=None, time=None):
        super().__init__(message)
        self.distance = distance
        self.time = time


class SingularJacobian(OrbSyncError):
    pass


class DenominatorNonPositive(OrbSyncError):
    """Phase speed f_theta + g_theta w is not positive: the phase parametrization broke down."""


class SlidingSurfaceDegenerate(OrbSyncError):
    pass


class NoActiveAgents(OrbSyncError):
    pass


class HypothesisViolated(OrbSyncError):
    pass


class ConfigError(OrbSyncError):
    pass
