"""Geometric algebra attention networks for self-supervised structure learning."""

__version__ = "0.1.0"
