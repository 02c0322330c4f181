"""Exception types raised across the package."""


class GflabError(Exception):
    """Base class for package errors."""


class DomainError(GflabError, ValueError):
    """A parameter lies outside the domain where the model is defined."""


class AdmissibilityError(GflabError, ValueError):
    """A potential or external field fails the convexity/strip requirements."""


class StripViolationError(GflabError, ArithmeticError):
    """A complex gradient left the strip on which the potential is controlled."""


class UnsupportedCapabilityError(GflabError, NotImplementedError):
    """The requested operation is not available for this potential or scheme."""


class ContractionFailureError(GflabError, RuntimeError):
    """A fixed-point iteration did not reach its tolerance."""


class OracleFailureError(GflabError, RuntimeError):
    """A reference computation failed its internal convergence check."""


class ResourceLimitError(GflabError, MemoryError):
    """The requested computation exceeds the configured size budget."""


class ConfigError(GflabError, ValueError):
    """Invalid experiment configuration."""
