"""Requirement-driven training of gated classifiers on skewed datasets."""

__version__ = "0.1.0"
