"""Sink-orthogonal token selection for decoder-only transformers."""

from ._core import *  # noqa: F401,F403
from ._core import (
    ConfigError,
    DimensionError,
    DomainError,
    LoadError,
    Model,
    ModelConfig,
    OrthoRankError,
    StateError,
    UsageError,
)

__all__ = [name for name in dir() if not name.startswith("_")]
