"""Renormalized integrals and time-sliced path integrals for heat kernels."""

__version__ = "0.1.0"
