"""Automated cardiac MRI plane prescription from axial localizer volumes."""

__version__ = "0.1.0"
