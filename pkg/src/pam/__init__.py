"""Pruned Adaptation Modules for exemplar-free class-incremental learning."""

__version__ = "0.1.0"
