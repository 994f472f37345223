"""Configuration-performance modelling for mobile network cells."""

__version__ = "0.1.0"
