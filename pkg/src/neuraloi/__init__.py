"""Trainable optimal interpolation of gappy space-time fields."""

__version__ = "0.1.0"
