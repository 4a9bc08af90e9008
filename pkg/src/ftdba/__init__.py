"""Fractal-trigger distributed backdoor attack lab for federated learning."""

__version__ = "0.1.0"
