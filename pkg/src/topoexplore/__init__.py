"""Learned exploration, topological mapping and image-goal navigation in 2-D grid worlds."""

__version__ = "0.1.0"
