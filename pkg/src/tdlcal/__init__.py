"""Simulation and calibration of tapped-delay-line time-to-digital converters.

Partial order reconstruction recovers the true bin sequence from tapped
patterns; time-bin interleaving merges several calibrated lines into one.
"""
__version__ = "0.1.0"
