"""Reflected BSDEs with a default jump on exactly solvable scenario trees."""

__version__ = "0.1.0"
