"""Controlled piecewise deterministic Markov processes driven by a 1D
reaction-diffusion flow, with an embedded-MDP dynamic programming solver."""

__version__ = "0.1.0"
