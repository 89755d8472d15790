"""Hierarchical causal audio transformer for infant-cry classification."""

__version__ = "0.1.0"
