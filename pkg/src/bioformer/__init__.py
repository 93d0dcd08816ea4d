"""Tiny attention-based classifiers for sEMG gesture recognition."""

__version__ = "0.1.0"
