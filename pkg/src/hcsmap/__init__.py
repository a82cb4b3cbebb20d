"""Canopy height and high-carbon-stock mapping from multi-band imagery."""

__version__ = "0.1.0"
