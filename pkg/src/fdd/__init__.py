"""Freeze-Diffuse-Decode: supervised diffusion geometry on frozen embedding matrices."""

__version__ = "0.1.0"
