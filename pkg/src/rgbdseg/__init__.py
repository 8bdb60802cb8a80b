"""Depth-aware transformer segmentation on a from-scratch autodiff core."""

__version__ = "0.1.0"
