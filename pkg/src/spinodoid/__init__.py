"""Data-driven multiscale topology optimization with 2D spinodoid materials."""

__version__ = "0.1.0"
