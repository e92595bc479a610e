"""GAN-rebalanced image classification with per-prediction explanations."""

__version__ = "0.1.0"
