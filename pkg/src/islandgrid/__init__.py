"""Islanded-microgrid simulator with observer-based distributed secondary voltage control."""

__version__ = "0.1.0"
