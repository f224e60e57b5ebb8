"""Plug-and-charge authentication and energy-trading simulator."""

__version__ = "0.1.0"
