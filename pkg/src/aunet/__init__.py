"""Autoregressive U-Net byte-level language model."""

__version__ = "0.1.0"
