"""Imbalanced visual-inspection benchmark pipeline."""

__version__ = "0.1.0"
