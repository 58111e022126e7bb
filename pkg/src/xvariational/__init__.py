"""Numerical laboratory for variational problems driven by vector fields."""

__version__ = "0.1.0"
