"""Bayesian spatio-temporal fusion of point and gridded data."""

__version__ = "0.1.0"
