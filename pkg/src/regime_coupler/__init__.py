"""Simulation and coupling diagnostics for diffusions with past-dependent switching."""

__version__ = "0.1.0"
