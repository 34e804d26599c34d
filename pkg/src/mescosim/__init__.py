"""Distributed multi-energy co-simulation testbed."""

__version__ = "0.1.0"
