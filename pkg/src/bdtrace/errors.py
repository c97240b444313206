"""Exception types shared across modules."""

from __future__ import annotations


class BDTraceError(Exception):
    """Base class for all package errors."""


class NonPositiveRate(BDTraceError, ValueError):
    def __init__(self, index: int, message: str | None = None):
        self.index = index
        super().__init__(message or f"nonpositive rate at index {index}")


class CapTooSmall(BDTraceError, ValueError):
    pass


class TailDivergent(BDTraceError, ArithmeticError):
    """Scale increments are not summable within the cap.

    The partially computed ScaleSpeed (with ``c_inf = inf``) is attached as
    ``scale_speed`` so callers can still classify it.
    """

    def __init__(self, message: str, scale_speed=None):
        super().__init__(message)
        self.scale_speed = scale_speed


class InfiniteScale(BDTraceError, ValueError):
    pass


class AtomBelowTruncation(BDTraceError, ValueError):
    pass


class InvalidChainParams(BDTraceError, ValueError):
    pass


class InvalidFellerParams(BDTraceError, ValueError):
    pass


class SingularSystem(BDTraceError, ArithmeticError):
    pass


class ZeroDenominator(BDTraceError, ZeroDivisionError):
    pass


class QuadratureNotConverged(BDTraceError, ArithmeticError):
    pass


class TailNotConverged(BDTraceError, ArithmeticError):
    pass


class DimensionMismatch(BDTraceError, ValueError):
    pass


class BandwidthTooSmall(BDTraceError, ValueError):
    pass


class RegimeMismatch(BDTraceError, ValueError):
    pass


class LevelMismatch(BDTraceError, ValueError):
    pass


class SnapFailure(BDTraceError, RuntimeError):
    pass


class ScheduleOrderViolation(BDTraceError, ValueError):
    pass


class InconsistentEstimates(BDTraceError, RuntimeError):
    pass


class TooFewSamples(BDTraceError, ValueError):
    pass


class ConfigError(BDTraceError, ValueError):
    exit_code = 2


class CheckFailed(BDTraceError, RuntimeError):
    exit_code = 1


class MinimalCase(UserWarning):
    """Informational: the parameters describe the minimal process."""
