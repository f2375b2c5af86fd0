"""Differentiable Gaussian-splat inverse rendering with shadow-guided relighting."""

__version__ = "0.1.0"
