"""Quantum error mitigation with influence-martingale-weighted quantum jump trajectories."""

__version__ = "0.1.0"
