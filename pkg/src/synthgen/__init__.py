"""Desk-scale multi-source synthetic-data domain generalisation for segmentation."""

__version__ = "0.1.0"
