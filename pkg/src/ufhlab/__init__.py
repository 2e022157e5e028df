"""Unified functional hashing laboratory."""
__version__ = "0.1.0"
