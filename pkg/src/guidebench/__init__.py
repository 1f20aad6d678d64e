"""Guideline-anchored benchmark construction and rubric-based scoring."""

__version__ = "0.1.0"
