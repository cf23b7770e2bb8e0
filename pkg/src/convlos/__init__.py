"""Convolutive mixture models of hospital length of stay."""

__version__ = "0.1.0"
