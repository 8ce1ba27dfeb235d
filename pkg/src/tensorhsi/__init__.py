"""Tensor-network feature extraction and lightweight classification for hyperspectral cubes."""

__version__ = "0.1.0"
