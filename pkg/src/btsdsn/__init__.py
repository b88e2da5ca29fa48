"""Deeply-supervised retinal vessel segmentation with short connections between side outputs."""

__version__ = "0.1.0"
