"""Consistency-regularized domain adaptation with few target labels, on small synthetic benchmarks."""

__version__ = "0.1.0"
