"""Dual-opacity 2D Gaussian splatting for reflective and transparent objects."""

__version__ = "0.1.0"
