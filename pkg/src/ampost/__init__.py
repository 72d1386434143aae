"""Amortized posterior sampling by distilling a diffusion prior into a conditional flow."""

__version__ = "0.1.0"
