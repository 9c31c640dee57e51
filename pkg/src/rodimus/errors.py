"""Exception types shared across the package."""


class RodimusError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(RodimusError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(RodimusError):
    """An input lies outside the mathematical domain of the operation."""


class ConfigError(RodimusError):
    """A configuration value violates a documented constraint."""


class DataError(RodimusError):
    """Input data (tokens, corpus files) violates a precondition."""


class IntegrityError(RodimusError):
    """A checkpoint file is corrupt, truncated, or mismatched."""


class NonFiniteError(RodimusError):
    """A tensor that must be finite contains NaN or infinity."""
