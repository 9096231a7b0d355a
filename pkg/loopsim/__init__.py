"""Feedback-loop simulator for exposure-aware matrix factorization."""

__version__ = "0.1.0"

__all__ = ["__version__"]
