"""Deterministic approximations of the beta-VAE objective and identifiability experiments."""

__version__ = "0.1.0"
