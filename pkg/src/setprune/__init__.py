"""Subset pruning for set classifiers: greedy and gradient-score selection."""

__version__ = "0.1.0"
