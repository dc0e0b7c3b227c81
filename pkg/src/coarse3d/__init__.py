"""Prototype-bank contrastive training for weakly supervised range-image segmentation."""

__version__ = "0.1.0"
