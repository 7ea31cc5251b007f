"""Exception types shared across the package."""


class HJBRepError(Exception):
    """Base class for all package errors."""


class ConfigError(HJBRepError, ValueError):
    """Malformed or invalid problem configuration."""


class DomainError(HJBRepError, ValueError):
    """A point lies outside the set an operation is defined on."""


class UnsupportedRepresentation(HJBRepError, TypeError):
    """The body representation cannot answer the requested query."""


class NumericalFailure(HJBRepError, RuntimeError):
    """An iterative or quadrature routine did not reach its tolerance."""


class InconsistentGrid(HJBRepError, ValueError):
    """Grid too small or too coarse for the requested computation."""
