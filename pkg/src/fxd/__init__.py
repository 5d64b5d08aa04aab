"""Gaussian-field reconstruction of synthetic driving scenes with out-of-path supervision."""

__version__ = "0.1.0"
