"""Numerical laboratory for higher-order boundary Harnack estimates."""

__version__ = "0.1.0"
