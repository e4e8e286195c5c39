"""Dual classification-plus-embedding loss training for small CNN classifiers."""

__version__ = "0.1.0"
