"""Simulation toolkit for flux-driven transmon emitter/detector circuits."""

__version__ = "0.1.0"
