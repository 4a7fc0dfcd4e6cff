"""Selective cross-domain consistency regularization for time-series domain generalization."""

__version__ = "0.1.0"
