"""Retrieval-augmented stock movement prediction engine."""

__version__ = "0.1.0"
