"""Differentiable thermal + low-light raw radiance fields at desk scale."""

__version__ = "0.1.0"
