"""Infrared small target detection with learnable sparse queries and distilled encoders."""

__version__ = "0.1.0"
