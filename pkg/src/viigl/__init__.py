"""Variational information-based interaction-grounded learning."""

__version__ = "0.1.0"
