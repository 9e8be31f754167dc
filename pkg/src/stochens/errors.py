"""Exception hierarchy shared across the package."""

from __future__ import annotations

__all__ = [
    "StochensError",
    "ConfigError",
    "ShapeError",
    "DomainError",
    "ArtifactError",
    "TrainingError",
    "SamplerError",
]


class StochensError(Exception):
    """Base class for all package errors."""


class ConfigError(StochensError):
    """Invalid configuration or violated invariant detected before compute."""


class ShapeError(StochensError):
    """Array dimensions incompatible with the declared architecture."""


class DomainError(StochensError):
    """Numerically invalid input: non-finite values, labels out of range."""


class ArtifactError(StochensError):
    """Missing, malformed, or hash-inconsistent on-disk artifact."""


class TrainingError(StochensError):
    """Training diverged or produced non-finite losses."""


class SamplerError(StochensError):
    """Sampler failed to produce usable draws."""
