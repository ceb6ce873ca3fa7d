"""Exception types raised across the package."""


class KDescError(Exception):
    """Base class for all package errors."""


class DomainError(KDescError, ValueError):
    """An attribute value lies outside the domain of its feature map."""


class RangeError(KDescError, ValueError):
    """Arguments outside the supported numeric range."""


class DegenerateInputError(KDescError, ValueError):
    """Input collapses to a zero vector (e.g. constant patch)."""


class FormatError(KDescError, ValueError):
    """Binary file header or payload does not match the expected format."""


class LoadError(KDescError, OSError):
    """A dataset file is missing, unreadable or inconsistent."""
