"""Differentiable mesh-anchored Gaussian splatting for real-to-sim reconstruction."""

__version__ = "0.1.0"
