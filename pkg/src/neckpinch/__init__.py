"""Rotationally symmetric Ricci flow neckpinch laboratory."""

__version__ = "0.1.0"
