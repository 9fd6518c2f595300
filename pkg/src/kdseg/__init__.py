"""Incremental class learning for semantic segmentation with knowledge distillation."""

__version__ = "0.1.0"
