"""Sparse-alignment conditioned flow matching on a synthetic token-to-latent task."""

__version__ = "0.1.0"
