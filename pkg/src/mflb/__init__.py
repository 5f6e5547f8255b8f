"""Multifractal traffic analysis and load-balancing simulation toolkit."""

__version__ = "0.1.0"
