"""Exception hierarchy shared across the package."""


class UrbanVktError(Exception):
    """Base class for all package errors."""


class DataError(UrbanVktError, ValueError):
    """Input data violates a schema or domain invariant."""


class ConfigError(UrbanVktError, ValueError):
    """A configuration value is missing or invalid."""


class UnreachableError(UrbanVktError):
    """Two network locations are not connected."""


class KnowledgeConflict(UrbanVktError):
    """Background knowledge contradicts an orientation found in the data."""
