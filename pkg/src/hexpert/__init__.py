"""Hierarchical bounded-rational expert networks for meta-learning."""

__version__ = "0.1.0"
