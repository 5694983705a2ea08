"""Anchor-based temporal action proposal pipeline."""

__version__ = "0.1.0"
