"""Discriminative anomalous sound detection under unlabeled conditions."""

__version__ = "0.1.0"
