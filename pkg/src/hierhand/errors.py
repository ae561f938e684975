"""Exception and warning types used across the package."""

from __future__ import annotations


class HierhandError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(HierhandError):
    """Invalid or unreadable configuration."""


class DataFormatError(HierhandError):
    """Malformed dataset, annotation, or tensor file."""


class RenderError(HierhandError):
    """A pose could not be rasterized into the frame."""


class DegenerateGeometryWarning(UserWarning):
    """Input geometry was rank deficient; a documented fallback was used."""


class DataQualityWarning(UserWarning):
    """Input data is usable but looks suspicious (out of range, too small)."""
