"""Orbital stabilization and time synchronization of periodic motions."""

__version__ = "0.1.0"
