"""Panorama/BEV co-retrieval for street-to-overhead geo-localization."""

__version__ = "0.1.0"
