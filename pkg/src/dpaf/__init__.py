"""Dual-path attention fusion deraining: model, losses, data and training."""

__version__ = "0.1.0"
