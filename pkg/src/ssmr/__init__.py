"""Learned reduced-order models on spectral submanifolds and model predictive control on top of them."""

__version__ = "0.1.0"
