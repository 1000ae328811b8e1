"""Quantum-noise simulator for a squeezed-light hybrid rf/dc Bell-Bloom magnetometer."""

__version__ = "0.1.0"
