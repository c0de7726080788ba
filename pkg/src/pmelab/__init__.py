"""Numerical laboratory for the porous medium equation with absorption."""

__version__ = "0.1.0"
