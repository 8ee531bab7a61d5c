"""Parallel branch search over chat models with a shared deduplicated note pool."""

__version__ = "0.1.0"
