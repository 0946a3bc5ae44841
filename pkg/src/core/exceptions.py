"""
Error types raised by the toolkit.

The CLI maps every HarrisError to exit code 2.
"""


class HarrisError(Exception):
    """Base class for all toolkit errors"""


class ConfigInvalid(HarrisError):
    """A simulation or experiment configuration violates its preconditions"""


class ParseError(HarrisError):
    """An experiment spec file could not be read or validated"""


class NonMonotone(HarrisError):
    """A covariation function is not non-increasing where monotonicity is required"""


class QuadratureFailure(HarrisError):
    """Adaptive quadrature could not reach the requested accuracy"""


class NotSymmetric(HarrisError):
    """A matrix passed for factorization is not symmetric"""


class FactorizationFailure(HarrisError):
    """Neither jittered Cholesky nor eigenvalue clipping produced a factor"""


class TimeNotRecorded(HarrisError):
    """A statistic was requested at a time the path record does not hold"""


class NotPsd(HarrisError):
    """A covariance matrix is not positive semidefinite"""


class InvalidCorrelation(HarrisError):
    """Equicorrelation parameters are outside the admissible range"""
