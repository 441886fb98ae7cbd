"""Co-simulation of lumped circuits and two-level quantum-dot devices."""

__version__ = "0.1.0"
