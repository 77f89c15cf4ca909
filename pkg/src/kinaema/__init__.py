"""Recurrent distributed-memory models for relative pose estimation on a synthetic 2D world."""

__version__ = "0.1.0"
