"""Micro diffusion transformer with text, reference-image and audio conditioning."""

__version__ = "0.1.0"
