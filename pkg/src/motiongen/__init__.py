"""Conditional-VAE trajectory generator with online constraint adaptation."""

__version__ = "0.1.0"
