"""Blind super-resolution by recurrent detail-structure alternative optimization."""

__version__ = "0.1.0"
