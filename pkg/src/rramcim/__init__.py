"""Behavioral simulator of a multi-core RRAM compute-in-memory chip."""

__version__ = "0.1.0"
