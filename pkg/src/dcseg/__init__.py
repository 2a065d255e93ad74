"""Doubly contrastive segmentation toolkit: losses, toy model, synthetic data, training."""

__version__ = "0.1.0"
