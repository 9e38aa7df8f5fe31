"""Hierarchical-attention correspondence pruning and essential-matrix regression."""

__version__ = "0.1.0"
