"""Partial-label learning: two networks pick confident labels for each other from a history of their predictions."""

__version__ = "0.1.0"
