"""Coordinate-normalized homography regression with differentiable warping."""

__version__ = "0.1.0"
