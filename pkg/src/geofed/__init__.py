"""Federated semantic segmentation simulator with geographic-heterogeneity handling."""

__version__ = "0.1.0"
