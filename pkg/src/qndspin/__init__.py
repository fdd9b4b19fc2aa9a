"""Simulation and Kalman-filter estimation of QND-measured collective spins in a SERF vapour."""

__version__ = "0.1.0"
