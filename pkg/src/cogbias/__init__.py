"""Anchoring and recency bias detection from user behaviour logs."""

__version__ = "0.1.0"
