"""Classifier training from sparse crowd annotations via adversarial augmentation."""

__version__ = "0.1.0"
