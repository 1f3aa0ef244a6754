"""Simulation and classification of walking gait from RF channel recordings."""

__version__ = "0.1.0"
