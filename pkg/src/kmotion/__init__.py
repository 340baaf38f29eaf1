"""Simulation and motion-corrected reconstruction toolkit for accelerated
motion-aware volumetric MR imaging."""

__version__ = "0.1.0"
