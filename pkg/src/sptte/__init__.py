"""Spatially smoothed probabilistic trip travel-time estimation on road networks."""

__version__ = "0.1.0"
