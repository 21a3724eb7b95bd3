"""Semantic radiance fields conditioned on pixel-aligned source-view features."""

__version__ = "0.1.0"
