"""Desk-scale lab for probability-flow ODE density estimation and attacks."""

__version__ = "0.1.0"
