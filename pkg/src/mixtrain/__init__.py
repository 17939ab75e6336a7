"""Keyword spotting with mixed-speech training strategies."""

__version__ = "0.1.0"
