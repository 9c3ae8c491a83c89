"""Desk-scale laboratory for how image-encoder pretraining and position encodings shape spatial reasoning."""

__version__ = "0.1.0"
