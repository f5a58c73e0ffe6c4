"""Distributional configuration-space distance fields for planar arms."""

__version__ = "0.1.0"
