"""Lifelong imitation learning with multi-modal feature and GMM policy distillation."""

__version__ = "0.1.0"
