"""Desk-scale numerical laboratory for small ground states of the cubic NLS with a potential."""

__version__ = "0.1.0"
