"""Desk-scale single-image-to-3D figure reconstruction toolkit."""

__version__ = "0.1.0"
