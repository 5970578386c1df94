"""Geo-aware semantic ID tokenization and generative next-POI prediction."""

__version__ = "0.1.0"
