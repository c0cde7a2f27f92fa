"""Synthetic spatial-reasoning VQA dataset tooling."""

__version__ = "0.1.0"
