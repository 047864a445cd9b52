"""Rigid-motion artifact simulation and correction for brain-MRI-like volumes."""

__version__ = "0.1.0"
