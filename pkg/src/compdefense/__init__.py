"""Lossy image compression as a preprocessing defense against gradient attacks."""

__version__ = "0.1.0"
