"""Cooperative perception, tracking and motion prediction simulator."""

__version__ = "0.1.0"
