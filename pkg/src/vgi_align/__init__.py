"""Geo-aligned remote-sensing image-text dataset construction and benchmark evaluation."""

__version__ = "0.1.0"
