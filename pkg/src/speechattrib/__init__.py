"""Synthetic speech attribution: log-mel front end, a NumPy CNN, and a six-class open-set pipeline."""

__version__ = "0.1.0"
