"""Shared-nothing sharding analysis and RSS key synthesis for network functions."""

__version__ = "0.1.0"
