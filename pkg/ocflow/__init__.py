"""Optical flow training with occlusion and transformation consistency."""

__version__ = "0.1.0"
