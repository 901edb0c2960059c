"""Exception taxonomy for the engine.

Every error carries a stable ``category`` string so the CLI can emit
machine-readable failures without string-matching messages.
"""

from __future__ import annotations


class EngineError(Exception):
    """Base class for all engine errors."""

    category = "EngineError"


class DimensionError(EngineError):
    """Tensor shapes do not satisfy an operation's contract."""

    category = "DimensionError"


class NonFiniteError(EngineError):
    """An operation produced (or was handed) NaN/Inf values."""

    category = "NonFiniteError"


class FusedIncompatible(EngineError):
    """Attention-map-based scoring was requested on the fused path.

    Fused attention streams tiles through an online softmax and never
    materializes the token-by-token attention map, so any importance score
    that reads the map cannot be computed. Use representation shift, which
    only needs the token embeddings themselves.
    """

    category = "FusedIncompatible"


class ScheduleError(EngineError):
    """A prune schedule or keep-set request is invalid."""

    category = "ScheduleError"


class ConfigError(EngineError):
    """A run-config file failed parsing or validation."""

    category = "ConfigError"


class ContainerError(EngineError):
    """Base class for weight-container file errors."""

    category = "ContainerError"


class BadMagic(ContainerError):
    category = "BadMagic"


class VersionUnsupported(ContainerError):
    category = "VersionUnsupported"


class ShapeMismatch(ContainerError):
    category = "ShapeMismatch"


class DigestMismatch(ContainerError):
    category = "DigestMismatch"
