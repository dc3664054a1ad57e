"""Hyperbolic graph kernels and a toy hand-object mesh refinement task."""

__version__ = "0.1.0"
