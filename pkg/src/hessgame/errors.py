"""Exception types raised across the package."""


class HessGameError(Exception):
    """Base class for all package errors."""


class NonFinite(HessGameError, ValueError):
    pass


class NotPSD(HessGameError, ValueError):
    pass


class DegenerateFrame(HessGameError, ValueError):
    pass


class RankOutOfRange(HessGameError, ValueError):
    pass


class DimMismatch(HessGameError, ValueError):
    pass


class NotOrthogonal(HessGameError, ValueError):
    pass


class RegionViolation(HessGameError, ValueError):
    pass


class OutsideDomain(HessGameError, ValueError):
    pass


class OutOfGrid(HessGameError, ValueError):
    pass


class StencilEscape(HessGameError, RuntimeError):
    pass


class NonMonotoneStencil(HessGameError, AssertionError):
    pass


class StepLimitExceeded(HessGameError, RuntimeError):
    """A simulated path did not leave the domain within the step budget."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record


class Blowup(HessGameError, RuntimeError):
    pass


class NotConverged(HessGameError, RuntimeError):
    """Policy iteration stopped at ``max_iter``; the partial field is attached."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class ConfigError(HessGameError, ValueError):
    pass
