"""Consistency checking between clinical notes and structured EHR tables."""

__version__ = "0.1.0"
