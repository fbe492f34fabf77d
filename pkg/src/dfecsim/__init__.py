"""Simulation of TCP and MPTCP with dynamically sized XOR forward error correction."""

__version__ = "0.1.0"
