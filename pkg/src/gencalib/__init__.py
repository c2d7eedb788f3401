"""Generic camera calibration with B-spline grid models and star patterns."""

__version__ = "0.1.0"
