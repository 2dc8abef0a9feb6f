"""Stochastic flows, Malliavin weights and transport for additive-noise SDEs."""

__version__ = "0.1.0"
