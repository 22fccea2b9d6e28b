"""Simulation and ergodicity diagnostics for semilinear SPDEs on [0, 1]."""

__version__ = "0.1.0"
