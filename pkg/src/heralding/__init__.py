"""Simulation, coincidence counting and accidental correction for heralded photon sources."""

__version__ = "0.1.0"
