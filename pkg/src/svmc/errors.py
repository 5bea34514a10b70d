"""Exception hierarchy shared across the package."""


class SvmcError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(SvmcError, ValueError):
    """Invalid parameters or inputs (non-finite values, bad shapes, nonpositive scales)."""


class NumericalError(SvmcError, ArithmeticError):
    """Base class for runtime numerical failures."""


class NotPositiveDefinite(NumericalError):
    """Cholesky failed even at the largest jitter in the schedule."""


class AllNegInfinity(NumericalError):
    """Every log-weight is -inf: total particle degeneracy."""


class ProposalUnsupported(NumericalError):
    """The proposal puts no mass where the transition has mass for every particle."""


class GridTooLarge(SvmcError, ValueError):
    """Requested inducing grid exceeds the configured size cap."""


class ConfigError(SvmcError, ValueError):
    """Schema or configuration validation failure."""
