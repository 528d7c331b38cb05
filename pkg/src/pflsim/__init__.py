"""Prompt-based personalized federated learning simulator (numpy, f64)."""

__version__ = "0.1.0"
