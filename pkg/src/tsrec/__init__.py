"""Repeat-aware sequential recommendation: temporal-interval and sequence-matching model."""

__version__ = "0.1.0"
