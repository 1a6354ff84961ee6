"""Simulation and verification toolkit for branching processes in Lévy environments."""

__version__ = "0.1.0"
