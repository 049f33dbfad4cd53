"""Accuracy-lossless model perturbation for federated MLP training."""

__version__ = "0.1.0"
