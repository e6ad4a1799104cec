"""Curiosity-driven analysis-by-synthesis on explicit scene codes."""

__version__ = "0.1.0"
