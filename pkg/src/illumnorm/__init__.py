"""Illumination-invariant autoencoders trained with cross-variant reconstruction targets."""

__version__ = "0.1.0"
