"""Differentiable graph neural architecture search over filtering and
aggregation operations."""

__version__ = "0.1.0"
