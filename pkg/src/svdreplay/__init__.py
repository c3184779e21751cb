"""Continual learning with lightweight SVD generators in place of replay memory."""

__version__ = "0.1.0"
