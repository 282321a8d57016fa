"""Masked predictive coding pre-training lab for small Transformer speech encoders."""

__version__ = "0.1.0"
