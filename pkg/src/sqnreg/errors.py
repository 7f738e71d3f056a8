"""Exception hierarchy shared by all modules.

Every error carries a short machine-readable ``category`` so the CLI can
report failures uniformly and map them to exit codes.
"""

from __future__ import annotations


class SqnregError(Exception):
    """Base class for all errors raised by this package."""

    category = "internal"


class GridError(SqnregError):
    category = "grid"


class FeatureError(SqnregError):
    category = "feature"


class SpectralError(SqnregError):
    category = "spectral"


class MeasureError(SqnregError):
    category = "measure"


class RegularizerError(SqnregError):
    category = "regularizer"


class OptimError(SqnregError):
    category = "optim"


class FormatError(SqnregError):
    """Malformed or unreadable file content (PGM, field files, manifests)."""

    category = "format"


class ConfigError(SqnregError):
    category = "config"
