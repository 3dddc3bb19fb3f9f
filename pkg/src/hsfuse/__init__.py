"""Hyperspectral + LiDAR fusion classification with diffusion features and prompt alignment."""

__version__ = "0.1.0"
