"""Spatio-temporal and spatial classification pipelines for canopy image series."""

__version__ = "0.1.0"
