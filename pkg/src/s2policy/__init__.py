"""Spatial-semantic diffusion policies for category-level manipulation skills."""

__version__ = "0.1.0"
