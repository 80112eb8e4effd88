"""Differentiable predictive control for glucose regulation."""

__version__ = "0.1.0"
