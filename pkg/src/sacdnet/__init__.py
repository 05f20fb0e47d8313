"""Semantic-aware bi-temporal change detection with single-temporal pre-training."""

__version__ = "0.1.0"
