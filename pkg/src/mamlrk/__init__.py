"""Runge-Kutta meta-learning: MAML generalised to explicit RK integrators."""

__version__ = "0.1.0"
