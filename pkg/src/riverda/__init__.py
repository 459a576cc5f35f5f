"""Ensemble data assimilation for 1D river flood reanalysis."""

__version__ = "0.1.0"
