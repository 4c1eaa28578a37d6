"""Benchmarking toolkit for fidelity and projected quantum kernel methods."""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    ConfigurationError,
    DomainError,
    IngestionError,
    QKBenchError,
    SchemaError,
    StudyError,
)
