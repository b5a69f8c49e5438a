"""Reconstruct Fisher metrics of parametric samplers from their samples."""

__version__ = '0.1.0'
