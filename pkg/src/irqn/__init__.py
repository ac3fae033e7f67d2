"""Iteratively regularized quasi-Newton methods for merely convex problems."""

from .backend import COMPILED

__version__ = "0.1.0"
__all__ = ["COMPILED", "__version__"]
