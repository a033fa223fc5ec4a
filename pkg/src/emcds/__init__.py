"""Simulation and statistical verification for Euler-Maruyama chains with
decreasing step sizes."""

__version__ = "0.1.0"
