"""Hyperspectral image segmentation: calibration, band selection, models, training and metrics."""

__version__ = "0.1.0"
