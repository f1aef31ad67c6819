"""Classify network devices into categories from their per-device traffic streams."""

__version__ = "0.1.0"
