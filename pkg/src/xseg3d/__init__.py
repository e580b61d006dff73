"""Explainable 3D UNet segmentation engine."""

__version__ = "0.1.0"
