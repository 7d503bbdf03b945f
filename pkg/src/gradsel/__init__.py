"""Gradient-aware training-data selection for a miniature causal LM."""

__version__ = "0.1.0"
