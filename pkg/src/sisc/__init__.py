"""Iterative scene / instance semantic scene completion."""

__version__ = "0.1.0"
