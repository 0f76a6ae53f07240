"""Pedestrian dynamics simulator: smooth navigation along floor-field gradients."""

__version__ = "0.1.0"
