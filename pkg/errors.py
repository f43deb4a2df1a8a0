"""
errors.py

Exception tree shared by every module of the toolkit.

- LwfrError is the root; catch it to handle any toolkit failure.
- ConfigError subclasses map to CLI exit code 2, DataError subclasses to 3.
"""

from __future__ import annotations


class LwfrError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(LwfrError):
    """Invalid configuration, hyperparameters or architecture description."""


class DataError(LwfrError):
    """Unreadable, malformed or insufficient input data."""


# nn-core / numerics
class ShapeMismatch(LwfrError):
    pass


class DegenerateBatch(LwfrError):
    pass


class ZeroVector(LwfrError):
    pass


class NonFiniteGradient(LwfrError):
    pass


class LabelOutOfRange(LwfrError):
    pass


class DivergedLoss(LwfrError):
    pass


class SerUndefined(LwfrError):
    pass


class MissingMetrics(LwfrError):
    pass


# configuration
class InvalidSpec(ConfigError):
    pass


class InvalidConfig(ConfigError):
    pass


class EpochOutOfRange(ConfigError):
    pass


# data
class InsufficientIdentities(DataError):
    pass


class DecodeError(DataError):
    pass


class BadDimensions(DataError):
    pass


class InvalidParams(DataError):
    pass


class TooFewPairs(DataError):
    pass


class InsufficientImpostors(DataError):
    def __init__(self, level: float, impostors: int):
        super().__init__(f"FAR level {level:g} needs at least {1.0 / level:.0f} impostor scores, got {impostors}")
        self.level = level
        self.impostors = impostors


class LabelNotInGallery(DataError):
    pass


class CorruptCheckpoint(DataError):
    pass


class IoFailure(DataError):
    pass
