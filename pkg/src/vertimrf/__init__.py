"""Differentially private data synthesis over vertically partitioned tables."""

__version__ = "0.1.0"
