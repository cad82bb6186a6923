"""Compositional scene autoencoder: CNN perception, typed shape programs, soft rasteriser."""

__version__ = "0.1.0"
