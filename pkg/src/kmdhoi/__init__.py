"""Kernel score tests for higher-order interactions in multi-view data."""

__version__ = "0.1.0"
