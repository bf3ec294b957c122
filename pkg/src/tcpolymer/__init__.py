"""Directed polymers in time-correlated random environments."""

__version__ = "0.1.0"
