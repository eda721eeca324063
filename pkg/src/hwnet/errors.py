"""Exception types raised across the package."""


class HWNetError(Exception):
    """Base class for all package errors."""


class NegativeRate(HWNetError):
    pass


class NotCriticallyLoaded(HWNetError):
    pass


class ResourcePoolingViolated(HWNetError):
    pass


class DomainViolation(HWNetError):
    pass


class StructureViolation(HWNetError):
    pass


class NoAnchorClass(HWNetError):
    pass


class InfeasibleShift(HWNetError):
    pass


class OutsideJWC(HWNetError):
    pass


class StateExplosion(HWNetError):
    """Simulated state left the configured guard box (likely unstable)."""


class Blowup(HWNetError):
    """SDE path left the configured guard radius (likely unstable control)."""


class InsufficientTail(HWNetError):
    pass


class FitFailed(HWNetError):
    def __init__(self, message, certificate=None):
        super().__init__(message)
        self.certificate = certificate


class ConfigError(HWNetError):
    """Invalid or incomplete run configuration; ``key`` names the offending entry."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key
